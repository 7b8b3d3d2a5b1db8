/* tslint:disable */
/* eslint-disable */

export class DemoFrame {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    info(): string;
    rgba(): Uint8Array;
    readonly height: number;
    readonly width: number;
}

export function polarMap(width: number, height: number, semi_major: number, semi_minor: number, angle_deg: number, lobe: number): DemoFrame;

export function polarPool(width: number, height: number, semi_major: number, semi_minor: number, angle_deg: number, lobe: number, rings: number, angles: number, overlap: number, max_mode: boolean): DemoFrame;

export function rotationCrop(width: number, height: number, angle_deg: number, crops: number): DemoFrame;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demoframe_free: (a: number, b: number) => void;
    readonly demoframe_height: (a: number) => number;
    readonly demoframe_info: (a: number) => [number, number];
    readonly demoframe_rgba: (a: number) => [number, number];
    readonly demoframe_width: (a: number) => number;
    readonly polarMap: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number];
    readonly polarPool: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: number, j: number) => [number, number, number];
    readonly rotationCrop: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
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
