//! PLY reader/writer for point clouds and triangle meshes.
//!
//! Supports `ascii` and `binary_little_endian` bodies. Recognized vertex
//! properties are `x y z`, `red green blue`, `nx ny nz` and `instance_id`;
//! anything else is parsed and ignored. Faces come from a `vertex_indices`
//! (or `vertex_index`) list and polygons are fan-triangulated.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud, TriMesh, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Scalar> {
        Some(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn is_float(self) -> bool {
        matches!(self, Scalar::F32 | Scalar::F64)
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { name: String, count: Scalar, item: Scalar },
}

impl Property {
    fn name(&self) -> &str {
        match self {
            Property::Scalar { name, .. } | Property::List { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

#[derive(Debug)]
struct Header {
    format: PlyFormat,
    elements: Vec<Element>,
    body_offset: usize,
}

fn ply_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Ply {
        offset: offset as u64,
        message: message.into(),
    }
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut pos = 0usize;
    let next_line = |pos: &mut usize| -> Result<(usize, String)> {
        let start = *pos;
        let rel = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| ply_err(start, "unterminated header"))?;
        *pos = start + rel + 1;
        let line = std::str::from_utf8(&bytes[start..start + rel])
            .map_err(|_| ply_err(start, "header is not valid text"))?;
        Ok((start, line.trim_end_matches('\r').to_string()))
    };

    let (_, magic) = next_line(&mut pos)?;
    if magic.trim() != "ply" {
        return Err(ply_err(0, "missing `ply` magic"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let (at, line) = next_line(&mut pos)?;
        let mut tok = line.split_whitespace();
        match tok.next() {
            None | Some("comment") | Some("obj_info") => {}
            Some("format") => {
                format = Some(match (tok.next(), tok.next()) {
                    (Some("ascii"), Some("1.0")) => PlyFormat::Ascii,
                    (Some("binary_little_endian"), Some("1.0")) => PlyFormat::BinaryLittleEndian,
                    (Some(f), _) => return Err(ply_err(at, format!("unsupported format `{f}`"))),
                    _ => return Err(ply_err(at, "malformed format line")),
                });
            }
            Some("element") => {
                let name = tok.next().ok_or_else(|| ply_err(at, "element without name"))?;
                let count = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| ply_err(at, "element without a valid count"))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| ply_err(at, "property before any element"))?;
                let ty = tok.next().ok_or_else(|| ply_err(at, "property without type"))?;
                let prop = if ty == "list" {
                    let count = tok.next().and_then(Scalar::parse);
                    let item = tok.next().and_then(Scalar::parse);
                    let name = tok.next();
                    match (count, item, name) {
                        (Some(count), Some(item), Some(name)) => Property::List {
                            name: name.to_string(),
                            count,
                            item,
                        },
                        _ => return Err(ply_err(at, "malformed list property")),
                    }
                } else {
                    let ty = Scalar::parse(ty)
                        .ok_or_else(|| ply_err(at, format!("unknown property type `{ty}`")))?;
                    let name = tok.next().ok_or_else(|| ply_err(at, "property without name"))?;
                    Property::Scalar {
                        name: name.to_string(),
                        ty,
                    }
                };
                el.properties.push(prop);
            }
            Some("end_header") => break,
            Some(other) => return Err(ply_err(at, format!("unexpected header keyword `{other}`"))),
        }
    }
    let format = format.ok_or_else(|| ply_err(0, "header has no format line"))?;
    Ok(Header {
        format,
        elements,
        body_offset: pos,
    })
}

/// Sequential value source over either body encoding.
enum Body<'a> {
    Ascii {
        bytes: &'a [u8],
        pos: usize,
    },
    Binary {
        bytes: &'a [u8],
        pos: usize,
    },
}

impl Body<'_> {
    fn offset(&self) -> usize {
        match self {
            Body::Ascii { pos, .. } | Body::Binary { pos, .. } => *pos,
        }
    }

    fn read(&mut self, ty: Scalar) -> Result<f64> {
        match self {
            Body::Ascii { bytes, pos } => {
                while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                    *pos += 1;
                }
                let start = *pos;
                while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
                    *pos += 1;
                }
                if start == *pos {
                    return Err(ply_err(start, "unexpected end of body"));
                }
                let s = std::str::from_utf8(&bytes[start..*pos]).map_err(|_| ply_err(start, "invalid text"))?;
                let v: f64 = s.parse().map_err(|_| ply_err(start, format!("invalid number `{s}`")))?;
                if !ty.is_float() && v.fract() != 0.0 {
                    return Err(ply_err(start, format!("expected an integer, got `{s}`")));
                }
                Ok(v)
            }
            Body::Binary { bytes, pos } => {
                let n = ty.size();
                let start = *pos;
                let b = bytes
                    .get(start..start + n)
                    .ok_or_else(|| ply_err(start, "unexpected end of body"))?;
                *pos += n;
                Ok(match ty {
                    Scalar::I8 => b[0] as i8 as f64,
                    Scalar::U8 => b[0] as f64,
                    Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
                    Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
                    Scalar::I32 => i32::from_le_bytes(b.try_into().unwrap()) as f64,
                    Scalar::U32 => u32::from_le_bytes(b.try_into().unwrap()) as f64,
                    Scalar::F32 => f32::from_le_bytes(b.try_into().unwrap()) as f64,
                    Scalar::F64 => f64::from_le_bytes(b.try_into().unwrap()),
                })
            }
        }
    }
}

#[derive(Debug, Default)]
struct RawPly {
    cloud: PointCloud,
    faces: Option<Vec<[u32; 3]>>,
}

fn parse(bytes: &[u8]) -> Result<RawPly> {
    let header = parse_header(bytes)?;
    let mut body = match header.format {
        PlyFormat::Ascii => Body::Ascii {
            bytes,
            pos: header.body_offset,
        },
        PlyFormat::BinaryLittleEndian => Body::Binary {
            bytes,
            pos: header.body_offset,
        },
    };
    let mut out = RawPly::default();
    let mut saw_vertex = false;
    for el in &header.elements {
        match el.name.as_str() {
            "vertex" => {
                saw_vertex = true;
                read_vertices(el, &mut body, &mut out.cloud)?;
            }
            "face" => out.faces = Some(read_faces(el, &mut body)?),
            _ => {
                for _ in 0..el.count {
                    for p in &el.properties {
                        skip_property(p, &mut body)?;
                    }
                }
            }
        }
    }
    if !saw_vertex {
        return Err(ply_err(header.body_offset, "no vertex element"));
    }
    Ok(out)
}

fn skip_property(p: &Property, body: &mut Body) -> Result<()> {
    match p {
        Property::Scalar { ty, .. } => {
            body.read(*ty)?;
        }
        Property::List { count, item, .. } => {
            let n = body.read(*count)? as usize;
            for _ in 0..n {
                body.read(*item)?;
            }
        }
    }
    Ok(())
}

fn read_vertices(el: &Element, body: &mut Body, cloud: &mut PointCloud) -> Result<()> {
    let slot = |name: &str| el.properties.iter().position(|p| p.name() == name);
    let xyz = match (slot("x"), slot("y"), slot("z")) {
        (Some(x), Some(y), Some(z)) => [x, y, z],
        _ => return Err(ply_err(body.offset(), "vertex element lacks x, y, z")),
    };
    let rgb = match (slot("red"), slot("green"), slot("blue")) {
        (Some(r), Some(g), Some(b)) => Some([r, g, b]),
        _ => None,
    };
    let nrm = match (slot("nx"), slot("ny"), slot("nz")) {
        (Some(x), Some(y), Some(z)) => Some([x, y, z]),
        _ => None,
    };
    let inst = slot("instance_id");
    let color_is_float = rgb.map(|[r, ..]| matches!(el.properties[r], Property::Scalar { ty, .. } if ty.is_float()));

    let n = el.count;
    let mut positions = Vec::with_capacity(n);
    let mut colors = rgb.map(|_| Vec::with_capacity(n));
    let mut normals = nrm.map(|_| Vec::with_capacity(n));
    let mut ids = inst.map(|_| Vec::with_capacity(n));
    let mut values = vec![0.0f64; el.properties.len()];
    for vi in 0..n {
        let at = body.offset();
        for (k, p) in el.properties.iter().enumerate() {
            match p {
                Property::Scalar { ty, .. } => values[k] = body.read(*ty)?,
                Property::List { .. } => skip_property(p, body)?,
            }
        }
        positions.push(Point3::new(values[xyz[0]], values[xyz[1]], values[xyz[2]]));
        if let (Some(c), Some(slots)) = (colors.as_mut(), rgb) {
            let scale = if color_is_float == Some(true) { 255.0 } else { 1.0 };
            c.push(slots.map(|s| (values[s] * scale).round().clamp(0.0, 255.0) as u8));
        }
        if let (Some(nv), Some(slots)) = (normals.as_mut(), nrm) {
            let raw = Vec3::new(values[slots[0]], values[slots[1]], values[slots[2]]);
            let len = raw.norm();
            if !(len > 1e-12) {
                return Err(ply_err(at, format!("vertex {vi} has a zero normal")));
            }
            // Stored float normals are only unit to f32 precision.
            nv.push(if (len - 1.0).abs() <= 1e-6 { raw } else { raw / len });
        }
        if let (Some(iv), Some(s)) = (ids.as_mut(), inst) {
            let v = values[s];
            if v < 0.0 || v > u32::MAX as f64 {
                return Err(ply_err(at, format!("vertex {vi} has an invalid instance_id {v}")));
            }
            iv.push(v as u32);
        }
    }
    *cloud = PointCloud {
        positions,
        colors,
        normals,
        instance_ids: ids,
    };
    Ok(())
}

fn read_faces(el: &Element, body: &mut Body) -> Result<Vec<[u32; 3]>> {
    let slot = el
        .properties
        .iter()
        .position(|p| matches!(p, Property::List { name, .. } if name == "vertex_indices" || name == "vertex_index"))
        .ok_or_else(|| ply_err(body.offset(), "face element lacks a vertex_indices list"))?;
    let mut faces = Vec::with_capacity(el.count);
    for _ in 0..el.count {
        for (k, p) in el.properties.iter().enumerate() {
            if k != slot {
                skip_property(p, body)?;
                continue;
            }
            let Property::List { count, item, .. } = p else { unreachable!() };
            let at = body.offset();
            let n = body.read(*count)? as usize;
            let mut idx = Vec::with_capacity(n);
            for _ in 0..n {
                let v = body.read(*item)?;
                if v < 0.0 {
                    return Err(ply_err(at, "negative vertex index"));
                }
                idx.push(v as u32);
            }
            if n < 3 {
                return Err(ply_err(at, format!("face with {n} vertices")));
            }
            for t in 1..n - 1 {
                faces.push([idx[0], idx[t], idx[t + 1]]);
            }
        }
    }
    Ok(faces)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn parse_point_cloud(bytes: &[u8]) -> Result<PointCloud> {
    let raw = parse(bytes)?;
    raw.cloud.validate()?;
    Ok(raw.cloud)
}

pub fn parse_mesh(bytes: &[u8]) -> Result<TriMesh> {
    let raw = parse(bytes)?;
    let faces = raw.faces.ok_or_else(|| ply_err(0, "file has no face element"))?;
    TriMesh::new(raw.cloud.positions, faces, raw.cloud.colors)
}

/// Loads the vertex element of a PLY file. Point order is preserved.
pub fn load_point_cloud(path: &Path) -> Result<PointCloud> {
    parse_point_cloud(&read_file(path)?)
}

pub fn load_mesh(path: &Path) -> Result<TriMesh> {
    parse_mesh(&read_file(path)?)
}

/// True if the file declares a non-empty face element.
pub fn has_faces(path: &Path) -> Result<bool> {
    let bytes = read_file(path)?;
    let header = parse_header(&bytes)?;
    Ok(header.elements.iter().any(|e| e.name == "face" && e.count > 0))
}

fn write_header(
    out: &mut Vec<u8>,
    format: PlyFormat,
    n_vertices: usize,
    cloud: &PointCloud,
    n_faces: Option<usize>,
) {
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    let mut h = format!("ply\nformat {fmt} 1.0\nelement vertex {n_vertices}\n");
    h.push_str("property double x\nproperty double y\nproperty double z\n");
    if cloud.colors.is_some() {
        h.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    if cloud.normals.is_some() {
        h.push_str("property double nx\nproperty double ny\nproperty double nz\n");
    }
    if cloud.instance_ids.is_some() {
        h.push_str("property uint instance_id\n");
    }
    if let Some(nf) = n_faces {
        h.push_str(&format!("element face {nf}\nproperty list uchar uint vertex_indices\n"));
    }
    h.push_str("end_header\n");
    out.extend_from_slice(h.as_bytes());
}

fn write_vertices(out: &mut Vec<u8>, format: PlyFormat, cloud: &PointCloud) {
    for i in 0..cloud.len() {
        let p = cloud.positions[i];
        match format {
            PlyFormat::Ascii => {
                // `{:?}` on f64 prints the shortest string that parses back exactly.
                let _ = write!(out, "{:?} {:?} {:?}", p.x, p.y, p.z);
                if let Some(c) = &cloud.colors {
                    let _ = write!(out, " {} {} {}", c[i][0], c[i][1], c[i][2]);
                }
                if let Some(n) = &cloud.normals {
                    let _ = write!(out, " {:?} {:?} {:?}", n[i].x, n[i].y, n[i].z);
                }
                if let Some(ids) = &cloud.instance_ids {
                    let _ = write!(out, " {}", ids[i]);
                }
                out.push(b'\n');
            }
            PlyFormat::BinaryLittleEndian => {
                for v in [p.x, p.y, p.z] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                if let Some(c) = &cloud.colors {
                    out.extend_from_slice(&c[i]);
                }
                if let Some(n) = &cloud.normals {
                    for v in [n[i].x, n[i].y, n[i].z] {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                if let Some(ids) = &cloud.instance_ids {
                    out.extend_from_slice(&ids[i].to_le_bytes());
                }
            }
        }
    }
}

pub fn encode_point_cloud(cloud: &PointCloud, format: PlyFormat) -> Vec<u8> {
    let mut out = Vec::new();
    write_header(&mut out, format, cloud.len(), cloud, None);
    write_vertices(&mut out, format, cloud);
    out
}

pub fn encode_mesh(mesh: &TriMesh, format: PlyFormat) -> Vec<u8> {
    let cloud = PointCloud {
        positions: mesh.vertices.clone(),
        colors: mesh.colors.clone(),
        ..Default::default()
    };
    let mut out = Vec::new();
    write_header(&mut out, format, cloud.len(), &cloud, Some(mesh.faces.len()));
    write_vertices(&mut out, format, &cloud);
    for f in &mesh.faces {
        match format {
            PlyFormat::Ascii => {
                let _ = writeln!(out, "3 {} {} {}", f[0], f[1], f[2]);
            }
            PlyFormat::BinaryLittleEndian => {
                out.push(3);
                for v in f {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    out
}

pub fn save_point_cloud(path: &Path, cloud: &PointCloud, format: PlyFormat) -> Result<()> {
    fs::write(path, encode_point_cloud(cloud, format)).map_err(|e| Error::io(path, e))
}

pub fn save_mesh(path: &Path, mesh: &TriMesh, format: PlyFormat) -> Result<()> {
    fs::write(path, encode_mesh(mesh, format)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const ASCII3: &str = "ply\nformat ascii 1.0\ncomment three points\nelement vertex 3\n\
property float x\nproperty float y\nproperty float z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\n\
end_header\n0 0 0 255 0 0\n1 0 0 0 255 0\n0 1 0.5 0 0 255\n";

    #[test]
    fn ascii_cloud_with_colors() {
        let c = parse_point_cloud(ASCII3.as_bytes()).unwrap();
        assert_eq!(c.len(), 3);
        let colors = c.colors.as_ref().unwrap();
        assert_eq!(colors.len(), c.positions.len());
        assert_eq!(colors[2], [0, 0, 255]);
        assert_eq!(c.positions[2], Point3::new(0.0, 1.0, 0.5));
    }

    #[test]
    fn binary_round_trip_is_bit_exact() {
        let cloud = PointCloud {
            positions: vec![Point3::new(0.1, -2.0 / 3.0, 1e-9), Point3::new(1.0, 2.0, 3.0)],
            colors: Some(vec![[1, 2, 3], [250, 0, 7]]),
            normals: Some(vec![Vec3::new(0.6, 0.8, 0.0), Vec3::new(0.0, 0.0, -1.0)]),
            instance_ids: Some(vec![0, 42]),
        };
        let bytes = encode_point_cloud(&cloud, PlyFormat::BinaryLittleEndian);
        let back = parse_point_cloud(&bytes).unwrap();
        assert_eq!(back, cloud);
        assert_eq!(encode_point_cloud(&back, PlyFormat::BinaryLittleEndian), bytes);
        let ascii = encode_point_cloud(&cloud, PlyFormat::Ascii);
        assert_eq!(parse_point_cloud(&ascii).unwrap(), cloud);
    }

    #[test]
    fn mesh_round_trip_and_fan_triangulation() {
        let quad = "ply\nformat ascii 1.0\nelement vertex 4\nproperty float x\nproperty float y\nproperty float z\n\
element face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n";
        let mesh = parse_mesh(quad.as_bytes()).unwrap();
        assert_eq!(mesh.faces, vec![[0, 1, 2], [0, 2, 3]]);
        let bin = encode_mesh(&mesh, PlyFormat::BinaryLittleEndian);
        assert_eq!(parse_mesh(&bin).unwrap(), mesh);
    }

    #[test]
    fn truncated_body_reports_offset() {
        let bytes = encode_point_cloud(
            &PointCloud::from_positions(vec![Point3::new(1.0, 2.0, 3.0); 2]),
            PlyFormat::BinaryLittleEndian,
        );
        let cut = &bytes[..bytes.len() - 4];
        match parse_point_cloud(cut) {
            Err(Error::Ply { offset, .. }) => assert_eq!(offset as usize, bytes.len() - 8),
            other => panic!("expected PLY error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_headers() {
        assert!(matches!(parse_point_cloud(b"plx\n"), Err(Error::Ply { offset: 0, .. })));
        let be = "ply\nformat binary_big_endian 1.0\nelement vertex 0\nend_header\n";
        assert!(parse_point_cloud(be.as_bytes()).is_err());
        let noxyz = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nend_header\n1\n";
        assert!(parse_point_cloud(noxyz.as_bytes()).is_err());
        let bad = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 abc\n";
        match parse_point_cloud(bad.as_bytes()) {
            Err(Error::Ply { offset, message }) => {
                assert_eq!(&bad[offset as usize..offset as usize + 3], "abc");
                assert!(message.contains("abc"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_elements_and_properties_skipped() {
        let s = "ply\nformat ascii 1.0\nelement camera 1\nproperty float f\nproperty list uchar int k\n\
element vertex 1\nproperty float x\nproperty float quality\nproperty float y\nproperty float z\nproperty int instance_id\nend_header\n\
1.5 2 7 8\n1 0.3 2 3 9\n";
        let c = parse_point_cloud(s.as_bytes()).unwrap();
        assert_eq!(c.positions, vec![Point3::new(1.0, 2.0, 3.0)]);
        assert_eq!(c.instance_ids, Some(vec![9]));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn cloud_round_trips_in_both_encodings(
                pts in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3, -1e3f64..1e3, any::<[u8; 3]>(), any::<u32>()), 0..40),
                ascii in any::<bool>(),
            ) {
                let cloud = PointCloud {
                    positions: pts.iter().map(|p| Point3::new(p.0, p.1, p.2)).collect(),
                    colors: Some(pts.iter().map(|p| p.3).collect()),
                    normals: None,
                    instance_ids: Some(pts.iter().map(|p| p.4).collect()),
                };
                let fmt = if ascii { PlyFormat::Ascii } else { PlyFormat::BinaryLittleEndian };
                let back = parse_point_cloud(&encode_point_cloud(&cloud, fmt)).unwrap();
                prop_assert_eq!(back, cloud);
            }
        }
    }
}
