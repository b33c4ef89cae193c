#pragma once

#if defined(__SSE__) || defined(_M_X64)
#include <xmmintrin.h>
#define EHRTEXT_HAS_MXCSR 1
#endif

namespace ehrtext::num {

// Flushes subnormal floats to zero for the guard's lifetime on this thread.
class FlushDenormals {
public:
    FlushDenormals() {
#ifdef EHRTEXT_HAS_MXCSR
        saved_ = _mm_getcsr();
        _mm_setcsr(saved_ | kFtz | kDaz);
#endif
    }
    ~FlushDenormals() {
#ifdef EHRTEXT_HAS_MXCSR
        _mm_setcsr(saved_);
#endif
    }
    FlushDenormals(const FlushDenormals&) = delete;
    FlushDenormals& operator=(const FlushDenormals&) = delete;

private:
#ifdef EHRTEXT_HAS_MXCSR
    static constexpr unsigned kFtz = 0x8000;
    static constexpr unsigned kDaz = 0x0040;
    unsigned saved_ = 0;
#endif
};

}  // namespace ehrtext::num
