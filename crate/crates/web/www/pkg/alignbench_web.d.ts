/* tslint:disable */
/* eslint-disable */

export class PreviewImages {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    original(): Uint8Array;
    perturbed(): Uint8Array;
    readonly height: number;
    /**
     * NaN when the perturbation changed the image size.
     */
    readonly meanAbsDiff: number;
    readonly originalSize: number;
    readonly width: number;
}

/**
 * Returns JSON: `{size, heat, radial, peak, peak_share}`.
 */
export function fingerprintSpectrum(seed: number, pairs: number, size: number, freq_x: number, freq_y: number, amplitude: number, lowpass_sigma: number): string;

/**
 * `spec_json` is a perturbation spec such as `{"kind": "blur", "sigma": 2}`.
 */
export function perturb(seed: number, size: number, spec_json: string): PreviewImages;

/**
 * Returns JSON: `{bins, ece, nll, bacc, auc}`.
 */
export function reliability(seed: number, n: number, separation: number, temperature: number, shift: number, fake_fraction: number, bins: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_previewimages_free: (a: number, b: number) => void;
    readonly fingerprintSpectrum: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
    readonly perturb: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly previewimages_height: (a: number) => number;
    readonly previewimages_meanAbsDiff: (a: number) => number;
    readonly previewimages_original: (a: number) => [number, number];
    readonly previewimages_originalSize: (a: number) => number;
    readonly previewimages_perturbed: (a: number) => [number, number];
    readonly previewimages_width: (a: number) => number;
    readonly reliability: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
