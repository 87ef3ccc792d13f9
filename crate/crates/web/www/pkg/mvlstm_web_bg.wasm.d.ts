/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_probeview_free: (a: number, b: number) => void;
export const gradcheck: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
export const probe: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: number) => [number, number, number];
export const probeview_convergence: (a: number) => number;
export const probeview_last_delta: (a: number) => number;
export const probeview_svg: (a: number) => [number, number];
export const tiedSymmetry: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
