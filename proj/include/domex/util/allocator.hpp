#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace domex {

/// Keeps large activation buffers on the heap instead of fresh mmap pages.
/// Training allocates and frees the same multi-megabyte tensors every step;
/// with glibc defaults each one page-faults back in, which roughly doubles
/// the step time. No-op on other C libraries.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace domex
