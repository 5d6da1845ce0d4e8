/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demo_free: (a: number, b: number) => void;
export const demo_invert: (a: number, b: number) => [number, number, number, number];
export const demo_last_relerr: (a: number) => number;
export const demo_measure: (a: number, b: number, c: bigint) => [number, number, number, number];
export const demo_modes_kept: (a: number, b: number) => number;
export const demo_n: (a: number) => number;
export const demo_n_data: (a: number) => number;
export const demo_new: (a: number, b: number) => [number, number, number];
export const demo_sample_truth: (a: number, b: bigint) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
