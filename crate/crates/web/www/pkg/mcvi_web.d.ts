/* tslint:disable */
/* eslint-disable */

/**
 * Positions `x0, y0, x1, y1, ...` of a leapfrog trajectory with unit mass.
 */
export function leapfrog_path(z: Float64Array, v: Float64Array, step_size: number, steps: number): Float64Array;

/**
 * `ln Z` of the target.
 */
export function log_normalizer(): number;

/**
 * Exact bounds `L_0, ..., L_T` of an over-relaxed chain with a fixed `alpha`
 * and reverse models fitted by least squares.
 */
export function overrelax_bounds(alpha: number, steps: number, seed: bigint): Float64Array;

/**
 * Trains `alpha` and the reverse models; returns `[alpha, exact bound]`.
 */
export function train_overrelax(steps: number, iterations: number, seed: bigint): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly leapfrog_path: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly log_normalizer: () => number;
    readonly overrelax_bounds: (a: number, b: number, c: bigint) => [number, number, number, number];
    readonly train_overrelax: (a: number, b: number, c: bigint) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
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
