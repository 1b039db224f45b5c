/* tslint:disable */
/* eslint-disable */

/**
 * Caption of synthetic clip `i` in a fixed demo corpus.
 */
export function corpus_caption(i: number): string;

/**
 * Test signal: a slow sine plus a fast square ripple.
 */
export function demo_signal(n: number): Float64Array;

/**
 * Band-filters a 1D signal along its only axis.
 */
export function filter_signal(signal: Float64Array, band_name: string, rho: number, gamma: number, residual: boolean): Float64Array;

/**
 * Mask values of a `d x h x w` grid at depth `slice`, row-major `h x w`.
 */
export function mask_slice(d: number, h: number, w: number, slice: number, band_name: string, rho: number, gamma: number): Float64Array;

/**
 * Ranks the first `n` corpus captions against `query`; returns the top `k`
 * as `index:score` strings joined by newlines. Ties go to the lower index.
 */
export function retrieve(query: string, n: number, k: number): string;

/**
 * Timesteps of an `s`-step sampler over `total` training steps, paired with
 * whether steering is injected there: `[t0, flag0, t1, flag1, ...]`.
 */
export function steering_schedule(total: number, s: number, fraction: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly corpus_caption: (a: number) => [number, number];
    readonly demo_signal: (a: number) => [number, number];
    readonly filter_signal: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
    readonly mask_slice: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number) => [number, number, number, number];
    readonly retrieve: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly steering_schedule: (a: number, b: number, c: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
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
