/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_previewimages_free: (a: number, b: number) => void;
export const fingerprintSpectrum: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
export const perturb: (a: number, b: number, c: number, d: number) => [number, number, number];
export const previewimages_height: (a: number) => number;
export const previewimages_meanAbsDiff: (a: number) => number;
export const previewimages_original: (a: number) => [number, number];
export const previewimages_originalSize: (a: number) => number;
export const previewimages_perturbed: (a: number) => [number, number];
export const previewimages_width: (a: number) => number;
export const reliability: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
