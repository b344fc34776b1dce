#pragma once

#include <cstddef>
#include <functional>

namespace ncchi {

/// Worker count used when a caller passes 0: NCCHI_THREADS if set, else hardware concurrency.
unsigned default_thread_count();

/// Runs body(begin, end, chunk_index) over [0, n) split into fixed-size chunks.
///
/// Chunk boundaries depend only on n and chunk_size, never on the thread
/// count, so per-chunk partial results combined in chunk order are
/// reproducible under any scheduling.
void parallel_chunks(std::size_t n, std::size_t chunk_size, unsigned threads,
                     const std::function<void(std::size_t, std::size_t, std::size_t)>& body);

inline std::size_t chunk_count(std::size_t n, std::size_t chunk_size) {
    return (n + chunk_size - 1) / chunk_size;
}

}  // namespace ncchi
