#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <torch/types.h>

namespace tred {

/// 64-bit FNV-1a, incrementally updatable.
class ContentHash {
 public:
  ContentHash& update(std::span<const std::byte> bytes);
  ContentHash& update(std::string_view text);
  ContentHash& update(const torch::Tensor& tensor);
  ContentHash& update(std::uint64_t value);

  std::uint64_t value() const { return state_; }
  std::string hex() const;

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::string hash_hex(std::string_view text);

/// Hash of every tensor's dtype, shape and raw bytes, in order.
std::string tensors_hash(const std::vector<torch::Tensor>& tensors);

}  // namespace tred
