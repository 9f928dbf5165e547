#pragma once

#include <compare>
#include <map>
#include <string>
#include <vector>

namespace iclprobe {

// A residual-stream site: layer 0 is the embedding output, layer l >= 1 the output of block l.
struct PatchAddress {
  int layer = 0;
  int position = 0;
  auto operator<=>(const PatchAddress&) const = default;
};

// Where an address's layer index is applied inside the forward pass.
enum class PatchSite {
  block_output,    // overwrite hidden[l] before block l+1 reads it
  post_attention,  // overwrite the residual after block l's attention sublayer (l >= 1)
};

// Replacement vectors keyed by address. Values are held in double; float activations
// round-trip through double exactly.
struct PatchSet {
  std::map<PatchAddress, std::vector<double>> entries;
  std::string provenance;

  bool empty() const noexcept { return entries.empty(); }
  std::size_t size() const noexcept { return entries.size(); }
  void set(PatchAddress address, std::vector<double> value) { entries[address] = std::move(value); }
};

}  // namespace iclprobe
