#pragma once

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "icd/instance.hpp"
#include "icd/params.hpp"
#include "icd/pyramid.hpp"

namespace icd {

// Checkpoint layout (all integers little-endian):
//   "ICDC" | version u32 | count u32 |
//   count × { name_len u16 | name (UTF-8) | ndim u8 | dims u32[ndim] | data f64[numel] }
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
public:
    CheckpointError(const std::string& what, std::size_t offset);
    std::size_t offset() const { return offset_; }

private:
    std::size_t offset_;
};

std::string encode_checkpoint(const std::vector<NamedTensor>& tensors);
// Parses the whole buffer before returning; any defect throws.
std::vector<NamedTensor> decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_checkpoint(const std::string& path);

// Copies values into the group's tensors. Every group tensor must be present
// with a matching shape; nothing is modified unless all of them are.
void restore_group(ParamGroup& group, const std::vector<NamedTensor>& tensors,
                   const std::string& prefix = "");

std::vector<NamedTensor> detector_tensors(const ToyDetector& det);
void save_detector(const std::string& path, const ToyDetector& det);
// Rebuilds a detector (config included) from a checkpoint. Teachers come back frozen.
std::unique_ptr<ToyDetector> load_detector(const std::string& path, Group group);
std::unique_ptr<ToyDetector> detector_from_tensors(const std::vector<NamedTensor>& tensors, Group group);

std::vector<NamedTensor> stats_tensors(const DatasetStats& stats);
DatasetStats stats_from_tensors(const std::vector<NamedTensor>& tensors);

}  // namespace icd
