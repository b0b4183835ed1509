/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    height(): number;
    /**
     * Builds a reduced-resolution scene from a preset name.
     */
    constructor(preset: string, seed: bigint);
    /**
     * Runs seeding onward and returns the evaluation as JSON.
     */
    run(lambda: number, p_seed: number, tau: number, seeds_only: boolean): string;
    /**
     * Top-down RGBA image of the rescan, `size` pixels square, detections
     * colored and other points gray.
     */
    top_view(size: number): Uint8Array;
    view_count(): number;
    /**
     * RGBA pixels of one view: `kind` is "reference", "rescan" or "residual"
     * (pixels above `tau` in red).
     */
    view_image(view: number, kind: string, tau: number): Uint8Array;
    width(): number;
}

/**
 * Solves a chain of nodes with priors `p_change` linked by unit edges and
 * returns the solver and exhaustive results as JSON.
 */
export function gmp_chain(p_change: Float64Array, lambda: number, epsilon: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_height: (a: number) => number;
    readonly demo_new: (a: number, b: number, c: bigint) => [number, number, number];
    readonly demo_run: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly demo_top_view: (a: number, b: number) => [number, number];
    readonly demo_view_count: (a: number) => number;
    readonly demo_view_image: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly demo_width: (a: number) => number;
    readonly gmp_chain: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
