/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const classify: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
export const decision_grid: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
export const metrics: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const refine_step: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: number, j: number, k: number, l: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
