/* @ts-self-types="./objvio_web.d.ts" */

/**
 * Projects an ellipsoid seen by a camera at the origin looking along +z.
 * The object sits at `(x, y, depth)` with yaw and pitch in radians.
 * Returns `[x_min, x_max, y_min, y_max]` of the tangent bbox followed by
 * `samples` outline points as `x, y` pairs, all in normalized image
 * coordinates. Empty when the ellipsoid is not fully in front.
 * @param {number} x
 * @param {number} y
 * @param {number} depth
 * @param {number} yaw
 * @param {number} pitch
 * @param {number} ux
 * @param {number} uy
 * @param {number} uz
 * @param {number} samples
 * @returns {Float64Array}
 */
export function project_ellipsoid(x, y, depth, yaw, pitch, ux, uy, uz, samples) {
    const ret = wasm.project_ellipsoid(x, y, depth, yaw, pitch, ux, uy, uz, samples);
    var v1 = getArrayF64FromWasm0(ret[0], ret[1]).slice();
    wasm.__wbindgen_free(ret[0], ret[1] * 8, 8);
    return v1;
}

/**
 * Propagates a state starting at rest at the origin under constant body
 * rate `w` and specific force `a` for `steps` samples of length `dt`, once
 * with the closed-form step and once with RK4 at `substeps` per sample.
 * Returns `[px, py, pz]` per step for the closed form, then the same for
 * RK4, then the largest position gap.
 * @param {number} wx
 * @param {number} wy
 * @param {number} wz
 * @param {number} ax
 * @param {number} ay
 * @param {number} az
 * @param {number} dt
 * @param {number} steps
 * @param {number} substeps
 * @returns {Float64Array}
 */
export function propagate_compare(wx, wy, wz, ax, ay, az, dt, steps, substeps) {
    const ret = wasm.propagate_compare(wx, wy, wz, ax, ay, az, dt, steps, substeps);
    var v1 = getArrayF64FromWasm0(ret[0], ret[1]).slice();
    wasm.__wbindgen_free(ret[0], ret[1] * 8, 8);
    return v1;
}

/**
 * Signed distance between the plane `b . x = bh` and the closest parallel
 * tangent plane of the axis-aligned ellipsoid with semi-axes `u`. NaN for
 * invalid input.
 * @param {number} bx
 * @param {number} by
 * @param {number} bz
 * @param {number} bh
 * @param {number} ux
 * @param {number} uy
 * @param {number} uz
 * @returns {number}
 */
export function tangent_distance(bx, by, bz, bh, ux, uy, uz) {
    const ret = wasm.tangent_distance(bx, by, bz, bh, ux, uy, uz);
    return ret;
}
function __wbg_get_imports() {
    const import0 = {
        __proto__: null,
        __wbindgen_init_externref_table: function() {
            const table = wasm.__wbindgen_externrefs;
            const offset = table.grow(4);
            table.set(0, undefined);
            table.set(offset + 0, undefined);
            table.set(offset + 1, null);
            table.set(offset + 2, true);
            table.set(offset + 3, false);
        },
    };
    return {
        __proto__: null,
        "./objvio_web_bg.js": import0,
    };
}

function getArrayF64FromWasm0(ptr, len) {
    ptr = ptr >>> 0;
    return getFloat64ArrayMemory0().subarray(ptr / 8, ptr / 8 + len);
}

let cachedFloat64ArrayMemory0 = null;
function getFloat64ArrayMemory0() {
    if (cachedFloat64ArrayMemory0 === null || cachedFloat64ArrayMemory0.byteLength === 0) {
        cachedFloat64ArrayMemory0 = new Float64Array(wasm.memory.buffer);
    }
    return cachedFloat64ArrayMemory0;
}

let wasmModule, wasmInstance, wasm;
function __wbg_finalize_init(instance, module) {
    wasmInstance = instance;
    wasm = instance.exports;
    wasmModule = module;
    cachedFloat64ArrayMemory0 = null;
    wasm.__wbindgen_start();
    return wasm;
}

async function __wbg_load(module, imports) {
    if (typeof Response === 'function' && module instanceof Response) {
        if (!module.ok) {
            throw new Error(`failed to fetch Wasm: ${module.status} ${module.statusText} fetching '${module.url}'`);
        }

        if (typeof WebAssembly.instantiateStreaming === 'function') {
            try {
                return await WebAssembly.instantiateStreaming(module, imports);
            } catch (e) {
                const validResponse = expectedResponseType(module.type);

                if (validResponse && module.headers.get('Content-Type') !== 'application/wasm') {
                    console.warn("`WebAssembly.instantiateStreaming` failed because your server does not serve Wasm with `application/wasm` MIME type. Falling back to `WebAssembly.instantiate` which is slower. Original error:\n", e);

                } else { throw e; }
            }
        }

        const bytes = await module.arrayBuffer();
        return await WebAssembly.instantiate(bytes, imports);
    } else {
        const instance = await WebAssembly.instantiate(module, imports);

        if (instance instanceof WebAssembly.Instance) {
            return { instance, module };
        } else {
            return instance;
        }
    }

    function expectedResponseType(type) {
        switch (type) {
            case 'basic': case 'cors': case 'default': return true;
        }
        return false;
    }
}

function initSync(module) {
    if (wasm !== undefined) return wasm;


    if (module !== undefined) {
        if (Object.getPrototypeOf(module) === Object.prototype) {
            ({module} = module)
        } else {
            console.warn('using deprecated parameters for `initSync()`; pass a single object instead')
        }
    }

    const imports = __wbg_get_imports();
    if (!(module instanceof WebAssembly.Module)) {
        module = new WebAssembly.Module(module);
    }
    const instance = new WebAssembly.Instance(module, imports);
    return __wbg_finalize_init(instance, module);
}

async function __wbg_init(module_or_path) {
    if (wasm !== undefined) return wasm;


    if (module_or_path !== undefined) {
        if (Object.getPrototypeOf(module_or_path) === Object.prototype) {
            ({module_or_path} = module_or_path)
        } else {
            console.warn('using deprecated parameters for the initialization function; pass a single object instead')
        }
    }

    if (module_or_path === undefined) {
        module_or_path = new URL('objvio_web_bg.wasm', import.meta.url);
    }
    const imports = __wbg_get_imports();

    if (typeof module_or_path === 'string' || (typeof Request === 'function' && module_or_path instanceof Request) || (typeof URL === 'function' && module_or_path instanceof URL)) {
        module_or_path = fetch(module_or_path);
    }

    const { instance, module } = await __wbg_load(await module_or_path, imports);

    return __wbg_finalize_init(instance, module);
}

export { initSync, __wbg_init as default };
