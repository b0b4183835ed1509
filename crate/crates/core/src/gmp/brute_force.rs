use super::{energy, mean_of, ChangeField, GmpProblem, Partition};
use crate::error::{Error, Result};

pub const BRUTE_FORCE_LIMIT: usize = 12;

/// Exact minimizer by enumerating every set partition of the nodes. Each
/// block takes the mean of its members, which is optimal for the fidelity.
pub fn brute_force_gmp(p: &ChangeField, problem: &GmpProblem) -> Result<(Partition, f64)> {
    problem.validate()?;
    let n = p.len();
    if n != problem.n_nodes {
        return Err(Error::DimensionMismatch(format!(
            "field has {n} nodes, problem has {}",
            problem.n_nodes
        )));
    }
    if n > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge {
            nodes: n,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    if n == 0 {
        return Ok((
            Partition {
                component: vec![],
                values: vec![],
            },
            0.0,
        ));
    }

    let mut best: Option<(Partition, f64)> = None;
    for_each_partition(n, |rgs| {
        let k = *rgs.iter().max().unwrap() as usize + 1;
        let values: Vec<_> = (0..k as u32)
            .map(|c| mean_of(rgs.iter().zip(&p.values).filter(|(b, _)| **b == c).map(|(_, v)| v)))
            .collect();
        let part = Partition {
            component: rgs.to_vec(),
            values,
        };
        let e = energy(p, &part.field(), problem);
        let better = match &best {
            None => true,
            Some((bp, be)) => e < *be - 1e-15 || (e <= *be + 1e-15 && k < bp.n_components()),
        };
        if better {
            best = Some((part, e));
        }
    });
    Ok(best.unwrap())
}

/// Calls `f` with every restricted growth string of length `n >= 1`, i.e.
/// every set partition with blocks numbered in order of first appearance.
fn for_each_partition(n: usize, mut f: impl FnMut(&[u32])) {
    let mut rgs = vec![0u32; n];
    loop {
        f(&rgs);
        let mut i = n - 1;
        loop {
            if i == 0 {
                return;
            }
            let prefix_max = *rgs[..i].iter().max().unwrap();
            if rgs[i] <= prefix_max {
                rgs[i] += 1;
                for r in rgs.iter_mut().skip(i + 1) {
                    *r = 0;
                }
                break;
            }
            i -= 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bell(n: usize) -> usize {
        // Bell triangle.
        let mut row = vec![1usize];
        for _ in 1..n {
            let mut next = vec![*row.last().unwrap()];
            for &x in &row {
                let v = *next.last().unwrap() + x;
                next.push(v);
            }
            row = next;
        }
        *row.last().unwrap()
    }

    #[test]
    fn enumerates_every_partition_once() {
        for n in 1..=7 {
            let mut seen = std::collections::HashSet::new();
            for_each_partition(n, |r| {
                assert!(seen.insert(r.to_vec()));
            });
            assert_eq!(seen.len(), bell(n), "n = {n}");
        }
        assert_eq!(bell(5), 52);
    }

    #[test]
    fn two_node_merges() {
        let p = ChangeField {
            values: vec![[0.8, 0.2], [0.5, 0.5]],
        };
        let prob = GmpProblem::new(2, [(0, 1, 1.0)]).with_epsilon(0.0);
        let (part, e) = brute_force_gmp(&p, &prob).unwrap();
        assert_eq!(part.n_components(), 1);
        assert!((part.values[0][0] - 0.65).abs() < 1e-12);
        assert!((e - 0.1013).abs() < 1e-4);
    }

    #[test]
    fn lambda_zero_singletons() {
        let p = ChangeField {
            values: vec![[0.8, 0.2], [0.5, 0.5], [0.3, 0.7]],
        };
        let prob = GmpProblem::new(3, [(0, 1, 1.0), (1, 2, 1.0)]).with_lambda(0.0);
        let (part, e) = brute_force_gmp(&p, &prob).unwrap();
        assert_eq!(e, 0.0);
        assert_eq!(part.n_components(), 3);
    }

    #[test]
    fn huge_lambda_single_component() {
        let p = ChangeField {
            values: vec![[0.8, 0.2], [0.5, 0.5], [0.3, 0.7], [0.9, 0.1]],
        };
        let prob = GmpProblem::new(4, [(0, 1, 1.0), (1, 2, 1.0), (2, 3, 1.0)]).with_lambda(1e6);
        let (part, _) = brute_force_gmp(&p, &prob).unwrap();
        assert_eq!(part.n_components(), 1);
        assert!((part.values[0][0] - 0.625).abs() < 1e-12);
    }

    #[test]
    fn too_large() {
        let p = ChangeField {
            values: vec![[0.5, 0.5]; 13],
        };
        let prob = GmpProblem::new(13, []);
        assert!(matches!(brute_force_gmp(&p, &prob), Err(Error::TooLarge { .. })));
    }
}
