#include "tred/hashing.hpp"

#include <cstdio>

namespace tred {

namespace {
constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;
}

ContentHash& ContentHash::update(std::span<const std::byte> bytes) {
  for (std::byte b : bytes) {
    state_ ^= static_cast<std::uint64_t>(b);
    state_ *= kFnvPrime;
  }
  return *this;
}

ContentHash& ContentHash::update(std::string_view text) {
  return update(std::as_bytes(std::span<const char>(text.data(), text.size())));
}

ContentHash& ContentHash::update(std::uint64_t value) {
  return update(std::as_bytes(std::span<const std::uint64_t, 1>(&value, 1)));
}

ContentHash& ContentHash::update(const torch::Tensor& tensor) {
  auto t = tensor.detach().to(torch::kCPU).contiguous();
  update(static_cast<std::uint64_t>(t.scalar_type()));
  for (auto s : t.sizes()) update(static_cast<std::uint64_t>(s));
  const auto* data = static_cast<const std::byte*>(t.data_ptr());
  return update(std::span<const std::byte>(data, t.numel() * t.element_size()));
}

std::string ContentHash::hex() const {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(state_));
  return buf;
}

std::string hash_hex(std::string_view text) { return ContentHash{}.update(text).hex(); }

std::string tensors_hash(const std::vector<torch::Tensor>& tensors) {
  ContentHash h;
  for (const auto& t : tensors) h.update(t);
  return h.hex();
}

}  // namespace tred
