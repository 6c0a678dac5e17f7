/* tslint:disable */
/* eslint-disable */

/**
 * Addressing weights (first `L` entries) followed by the read vector (`D` entries).
 */
export function address(slots: Float64Array, width: number, key: Float64Array, sharpness: number): Float64Array;

export function interval_iou(a_start: number, a_end: number, b_start: number, b_end: number): number;

/**
 * Row-major `L×2` principal-component coordinates of the slots.
 */
export function project(slots: Float64Array, width: number): Float64Array;

/**
 * `L·D` uniform slots in `[-1, 1]`, row-major.
 */
export function random_bank(slots: number, width: number, seed: bigint): Float64Array;

/**
 * Indices (into the input order) of the boxes kept by NMS, best first.
 */
export function suppress(starts: Float64Array, ends: Float64Array, scores: Float64Array, top_n: number): Uint32Array;

/**
 * Writes `value` with erase `erase` at the slots addressed by `key`; returns the new slots.
 */
export function write(slots: Float64Array, width: number, key: Float64Array, value: Float64Array, erase: number, sharpness: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly address: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly interval_iou: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly project: (a: number, b: number, c: number) => [number, number, number, number];
    readonly random_bank: (a: number, b: number, c: bigint) => [number, number];
    readonly suppress: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
    readonly write: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: number) => [number, number, number, number];
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
