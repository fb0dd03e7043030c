#pragma once

#include <cstdint>
#include <string>

#include "json.hpp"
#include "raydiff/datapipe.hpp"
#include "raydiff/inference.hpp"
#include "raydiff/rin.hpp"
#include "raydiff/training.hpp"

// JSON forms of every configuration block and the run-level config file. Readers are strict:
// a key that is not part of the block is an error, missing keys keep their defaults.

namespace raydiff {

using Json = nlohmann::json;

/// Synthetic-data settings used by `gen`.
struct DataConfig {
    int num_scenes = 8;
    int num_frames = 100;
    int width = 32;
    int height = 32;
    Layout layout = Layout::Orbit;
    double fov_degrees = 60.0;
};

struct RunConfig {
    std::string profile = "toy";
    std::uint64_t seed = 0;
    DataConfig data;
    CurationConfig curation;
    RinConfig model;
    PipelineConfig pipeline;
    TrainConfig train;
    InferenceOptions inference;

    /// "toy" or "paper-defaults".
    static RunConfig preset(const std::string& profile);
    void validate() const;
};

Json to_json(const RinConfig& c);
Json to_json(const PipelineConfig& c);
Json to_json(const TrainConfig& c);
Json to_json(const CurationConfig& c);
Json to_json(const InferenceOptions& c);
Json to_json(const DataConfig& c);
Json to_json(const RunConfig& c);

/// Overlay `j` on `base`.
RinConfig read_rin_config(const Json& j, RinConfig base = {});
PipelineConfig read_pipeline_config(const Json& j, PipelineConfig base = {});
TrainConfig read_train_config(const Json& j, TrainConfig base = {});
CurationConfig read_curation_config(const Json& j, CurationConfig base = {});
InferenceOptions read_inference_options(const Json& j, InferenceOptions base = {});
DataConfig read_data_config(const Json& j, DataConfig base = {});
/// Starts from the preset named by j["profile"] (default "toy") and overlays the rest.
RunConfig read_run_config(const Json& j);

RunConfig load_run_config(const std::string& path);
void save_run_config(const std::string& path, const RunConfig& c);

}  // namespace raydiff
