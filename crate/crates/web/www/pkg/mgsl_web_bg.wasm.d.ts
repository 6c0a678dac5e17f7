/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const address: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
export const interval_iou: (a: number, b: number, c: number, d: number) => [number, number, number];
export const project: (a: number, b: number, c: number) => [number, number, number, number];
export const random_bank: (a: number, b: number, c: bigint) => [number, number];
export const suppress: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
export const write: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
