#pragma once

#include <cstdint>
#include <vector>

namespace statecf {

// Index into the shared text vocabulary (actions first, then states).
using Token = std::uint32_t;
using TokenSeq = std::vector<Token>;

// A plain embedding vector; frozen text embeddings and evaluation outputs use it.
using Embedding = std::vector<double>;

}  // namespace statecf
