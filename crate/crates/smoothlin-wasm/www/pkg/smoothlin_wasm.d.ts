/* tslint:disable */
/* eslint-disable */

/**
 * Renders the `analyze` report of a TOML configuration (same keys as the CLI).
 */
export function analyze(config_toml: string): string;

/**
 * Planar exponent `min{log λ₁/(log λ₁ − log λ₂), log λ₂/(log λ₂ − log λ₁)} − ε`
 * for `0 < λ₁ < 1 < λ₂`.
 */
export function beta_planar(lambda1: number, lambda2: number, epsilon: number): number;

/**
 * Linearizes `F(x) = (λ₁x₁ + c x₂², λ₂x₂)` on the box of the given radius and
 * returns `[Φ₁(x), Φ₂(x), oracle Φ₁(x), max conjugacy residual]`, where the
 * oracle is `x₁ + c/(λ₁ − λ₂²) x₂²`.
 */
export function planar_conjugacy(lambda1: number, lambda2: number, c: number, radius: number, x1: number, x2: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly analyze: (a: number, b: number) => [number, number, number, number];
    readonly beta_planar: (a: number, b: number, c: number) => number;
    readonly planar_conjugacy: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
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
