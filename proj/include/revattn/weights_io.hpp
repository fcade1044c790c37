#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "revattn/model.hpp"
#include "revattn/tokenizer.hpp"

namespace revattn {

// One named tensor read from or written to a tensor container. Values are
// held in double; the on-disk dtype is F32 or F64.
struct NamedTensor {
  std::string dtype = "F32";
  std::vector<long> shape;
  std::vector<double> values;  // row-major
};

using TensorMap = std::map<std::string, NamedTensor>;

// Container layout: 8-byte little-endian header length, a JSON header
// {name: {dtype, shape, data_offsets: [begin, end]}} and the raw
// little-endian payloads. Throws IoError / FixtureCorrupt.
TensorMap read_tensor_file(const std::filesystem::path& path);
void write_tensor_file(const std::filesystem::path& path, const TensorMap& tensors);

enum class WeightConvention { kNative, kGpt2 };

struct ModelManifest {
  WeightConvention convention = WeightConvention::kNative;
  // Linear weights stored as [out, in] and needing a transpose on load.
  bool transposed_linear = false;
  ModelConfig config;
  std::filesystem::path tensors;
  std::optional<std::filesystem::path> vocab;
};

struct LoadedModel {
  ModelManifest manifest;
  ModelWeights<double> weights;
  std::optional<Tokenizer> tokenizer;
};

// Reads a mapping manifest {convention, transposed_linear, config, tensors,
// vocab?}; relative paths resolve against the manifest directory.
ModelManifest read_model_manifest(const std::filesystem::path& path);

LoadedModel load_model(const std::filesystem::path& manifest_path);

// Native naming (see for_each_tensor), F64 payloads unless `f32` is set.
void save_model(const std::filesystem::path& dir, const ModelConfig& config,
                const ModelWeights<double>& weights, const Tokenizer* tokenizer, bool f32 = false);

// Maps GPT-2 checkpoint names to the native layout: splits the fused
// c_attn projection, ties the unembedding to wte unless lm_head is present.
ModelWeights<double> weights_from_gpt2(const ModelConfig& config, const TensorMap& tensors,
                                       bool transposed_linear);
ModelWeights<double> weights_from_native(const ModelConfig& config, const TensorMap& tensors);
TensorMap native_tensors(const ModelWeights<double>& weights, bool f32);

}  // namespace revattn
