/* tslint:disable */
/* eslint-disable */

/**
 * Projects an ellipsoid seen by a camera at the origin looking along +z.
 * The object sits at `(x, y, depth)` with yaw and pitch in radians.
 * Returns `[x_min, x_max, y_min, y_max]` of the tangent bbox followed by
 * `samples` outline points as `x, y` pairs, all in normalized image
 * coordinates. Empty when the ellipsoid is not fully in front.
 */
export function project_ellipsoid(x: number, y: number, depth: number, yaw: number, pitch: number, ux: number, uy: number, uz: number, samples: number): Float64Array;

/**
 * Propagates a state starting at rest at the origin under constant body
 * rate `w` and specific force `a` for `steps` samples of length `dt`, once
 * with the closed-form step and once with RK4 at `substeps` per sample.
 * Returns `[px, py, pz]` per step for the closed form, then the same for
 * RK4, then the largest position gap.
 */
export function propagate_compare(wx: number, wy: number, wz: number, ax: number, ay: number, az: number, dt: number, steps: number, substeps: number): Float64Array;

/**
 * Signed distance between the plane `b . x = bh` and the closest parallel
 * tangent plane of the axis-aligned ellipsoid with semi-axes `u`. NaN for
 * invalid input.
 */
export function tangent_distance(bx: number, by: number, bz: number, bh: number, ux: number, uy: number, uz: number): number;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly project_ellipsoid: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: number) => [number, number];
    readonly propagate_compare: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: number) => [number, number];
    readonly tangent_distance: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
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
