/* tslint:disable */
/* eslint-disable */

/**
 * Class probabilities of the 2-D point `(x, y)` against base weights and
 * novel prototypes, at scale `gamma`.
 */
export function classify(base: Float64Array, novel: Float64Array, x: number, y: number, gamma: number): Float64Array;

/**
 * Winning class index per cell of an `n x n` grid over `[-extent, extent]^2`,
 * row by row from the top.
 */
export function decision_grid(base: Float64Array, novel: Float64Array, gamma: number, n: number, extent: number): Uint32Array;

/**
 * Degradation metrics from the four restricted/joint accuracies, as JSON.
 */
export function metrics(acc_b_all: number, acc_n_all: number, acc_b_b: number, acc_n_n: number, base_fraction: number): string;

/**
 * One refinement step of the novel prototypes using the support points
 * (with their novel class indices) and the unlabeled points.
 */
export function refine_step(base: Float64Array, novel: Float64Array, support: Float64Array, support_class: Uint32Array, unlabeled: Float64Array, gamma: number, alpha: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly classify: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
    readonly decision_grid: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
    readonly metrics: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly refine_step: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: number, j: number, k: number, l: number) => [number, number, number, number];
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
