/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const project_ellipsoid: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: number) => [number, number];
export const propagate_compare: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: number) => [number, number];
export const tangent_distance: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
