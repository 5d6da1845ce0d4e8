/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * TSVD reconstruction keeping eigenvalues ≥ `level`·λ₁.
     */
    invert(level: number): Float64Array;
    last_relerr(): number;
    /**
     * Noisy sensor readings d = Hu + a·η⊙Hu of the current truth.
     */
    measure(noise_level: number, seed: bigint): Float64Array;
    /**
     * Number of retained modes at a truncation level.
     */
    modes_kept(level: number): number;
    n(): number;
    n_data(): number;
    /**
     * `n`×`n` grid, `m`×`m` sensor lattice. Precomputes the eigenpairs of H*H.
     */
    constructor(n: number, m: number);
    /**
     * Draws a new truth (mean 2, anisotropic correlation); returns it row-major.
     */
    sample_truth(seed: bigint): Float64Array;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_invert: (a: number, b: number) => [number, number, number, number];
    readonly demo_last_relerr: (a: number) => number;
    readonly demo_measure: (a: number, b: number, c: bigint) => [number, number, number, number];
    readonly demo_modes_kept: (a: number, b: number) => number;
    readonly demo_n: (a: number) => number;
    readonly demo_n_data: (a: number) => number;
    readonly demo_new: (a: number, b: number) => [number, number, number];
    readonly demo_sample_truth: (a: number, b: bigint) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
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
