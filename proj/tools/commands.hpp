#pragma once

#include "run_config.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace worldkit::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;

const std::vector<std::string> &verbs();

struct CommandOptions {
    bool deterministic = false;
    /// eval only: explicit OCC3 pairs instead of the forecast artifacts.
    std::vector<std::string> pred;
    std::vector<std::string> gt;
};

/// Runs one pipeline stage inside artifact_dir(cfg). Artifacts of earlier
/// stages are read from the same directory:
///
///   synth          scene.json, gt_t<k>.occ, gt_t0.ppm
///   fit            gaussians.gset, fit_trace.csv, fit_report.json
///   gradcheck      gradcheck.json
///   flow-pretrain  flow_head.flwh, flow_trace.csv, flow_report.json
///   plan-train     planner.plnw, plan_trace.csv, plan_report.json, plan_traj_0.csv
///   forecast       pred_t<k>.occ, pred_t<k>.ppm
///   eval           eval.csv, eval_step<k>.csv, eval.json
///   render         render_c<c>_depth.pgm, render_c<c>_labels.ppm, oracle_c<c>_*.p?m
///
/// Every stage also writes config.json. Returns kExitOk, kExitValidation
/// (bad input, missing prerequisite, failed check) or kExitRuntime.
int run_command(const std::string &verb, const RunConfig &cfg, const CommandOptions &opt, std::ostream &log,
                std::ostream &err);

} // namespace worldkit::cli
