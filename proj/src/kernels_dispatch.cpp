// SPDX-License-Identifier: Apache-2.0
#include "esft/kernels.hpp"

#include <cstdlib>

#include "esft/common.hpp"

namespace esft::kernels {
namespace {

bool cpu_has_avx2() {
#if defined(__GNUC__) && (defined(__x86_64__) || defined(__i386__))
    return __builtin_cpu_supports("avx2") != 0;
#else
    return false;
#endif
}

Backend initial_backend() {
    // ESFT_KERNELS is read once, before the first kernel call; later changes
    // to the environment have no effect. Use set_backend() instead.
    const char* env = std::getenv("ESFT_KERNELS");
    if (env != nullptr && *env != '\0') {
        const std::string v(env);
        if (v == "scalar") return Backend::scalar;
        if (v == "avx2") {
            if (!avx2_available()) {
                throw ConfigError("ESFT_KERNELS=avx2 but the avx2 lane is unavailable on this build/CPU");
            }
            return Backend::avx2;
        }
        throw ConfigError("unknown ESFT_KERNELS value '" + v + "' (expected scalar or avx2)");
    }
    return avx2_available() ? Backend::avx2 : Backend::scalar;
}

Backend& state() {
    static Backend b = initial_backend();
    return b;
}

} // namespace

#ifndef ESFT_HAVE_AVX2
const Ops& avx2_ops() {
    throw ConfigError("avx2 kernels are not compiled into this binary");
}
#endif

bool avx2_compiled_in() {
#ifdef ESFT_HAVE_AVX2
    return true;
#else
    return false;
#endif
}

bool avx2_available() {
    return avx2_compiled_in() && cpu_has_avx2();
}

const Ops& active() {
    return state() == Backend::avx2 ? avx2_ops() : scalar_ops();
}

Backend active_backend() {
    return state();
}

void set_backend(Backend b) {
    if (b == Backend::avx2 && !avx2_available()) {
        throw ConfigError("avx2 kernel lane is unavailable on this build/CPU");
    }
    state() = b;
}

std::string backend_name(Backend b) {
    return b == Backend::avx2 ? "avx2" : "scalar";
}

} // namespace esft::kernels
