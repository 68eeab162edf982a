#pragma once

#include "worldkit/bev_raster.hpp"
#include "worldkit/occupancy.hpp"
#include "worldkit/recon_loss.hpp"
#include "worldkit/synth.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace worldkit::cli {

/// Bad config text, unknown key, wrong type or out-of-range value.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string &what) : std::runtime_error(what) {}
};

struct OptimSettings {
    int fit_iters = 500;
    double fit_step = 1e-2;
    int flow_iters = 100;
    double flow_step = 1e-2;
    int flow_hidden = 32;
    int flow_transitions = 2; ///< frame pairs (t, t+1) used for flow-pretrain
    int plan_steps = 2000;
    double plan_step = 1e-3;
    int plan_batch = 4;
    int plan_scenes = 16;
};

struct GradcheckSettings {
    int scenes = 20;
    int gaussians = 20;
    int image = 32;
    double threshold = 1e-3;
};

/// One experiment. Every field has a default; JSON keys mirror field names.
struct RunConfig {
    std::uint64_t seed = 7;
    std::string output_dir = "runs";
    SceneKnobs scene;
    int gaussians = 64;
    BevSpec bev;
    OccSpec occ;
    OptimSettings optim;
    int horizon = 6;
    int forecast_steps = 3;
    double tau = kDefaultOccupancyThreshold;
    LossWeights loss;
    double bev_weight = 1.0;
    GradcheckSettings gradcheck;

    void validate() const;
};

nlohmann::json config_to_json(const RunConfig &cfg);

/// Merges `doc` over the defaults. Keys absent from the defaults are rejected
/// by their dotted path; integers must stay integers.
RunConfig config_from_json(const nlohmann::json &doc);

/// `text` may be empty (all defaults). Overrides are "dotted.key=value" with
/// the value parsed as JSON when possible and as a string otherwise.
RunConfig parse_config(const std::string &text, const std::vector<std::string> &overrides = {});
RunConfig load_config(const std::filesystem::path &path, const std::vector<std::string> &overrides = {});

/// FNV-1a 64 of the sorted-key JSON dump, output_dir excluded.
std::uint64_t config_hash(const RunConfig &cfg);
/// output_dir / <16 hex digits of config_hash>.
std::filesystem::path artifact_dir(const RunConfig &cfg);

} // namespace worldkit::cli
