/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demoframe_free: (a: number, b: number) => void;
export const demoframe_height: (a: number) => number;
export const demoframe_info: (a: number) => [number, number];
export const demoframe_rgba: (a: number) => [number, number];
export const demoframe_width: (a: number) => number;
export const polarMap: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number];
export const polarPool: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: number, j: number) => [number, number, number];
export const rotationCrop: (a: number, b: number, c: number, d: number) => [number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;
