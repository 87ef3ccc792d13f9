/* tslint:disable */
/* eslint-disable */

export class ProbeView {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    /**
     * First step whose change is below epsilon, if any.
     */
    readonly convergence: number | undefined;
    /**
     * Largest per-dimension change over the final step.
     */
    readonly last_delta: number;
    readonly svg: string;
}

export function gradcheck(variant_name: string, input_dim: number, hidden_dim: number, steps: number, seed: number, tolerance: number): string;

export function probe(variant_name: string, hidden_dim: number, seed: number, _class: number, mode: number, tau: number, n: number, epsilon: number): ProbeView;

export function tiedSymmetry(variant_name: string, hidden_dim: number, seed: number, steps: number): number;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_probeview_free: (a: number, b: number) => void;
    readonly gradcheck: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
    readonly probe: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: number) => [number, number, number];
    readonly probeview_convergence: (a: number) => number;
    readonly probeview_last_delta: (a: number) => number;
    readonly probeview_svg: (a: number) => [number, number];
    readonly tiedSymmetry: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
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
