// Command-line front end: data generation, the two training stages,
// evaluation against the built-in baselines, the ablation sweep, report
// rendering, and a standalone scorer for trajectory CSVs.

#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "sagdrive/ablation.hpp"
#include "sagdrive/harness.hpp"
#include "sagdrive/report.hpp"

using namespace sagdrive;

namespace {

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> overrides;
};

void add_config_opts(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_path, "JSON run configuration");
  cmd->add_option("--set", opts.overrides, "override, e.g. --set optim.s1_epochs=3");
}

void print_means(const std::string& name, const ScoreCard& m) {
  auto pct = [](double v) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%.1f", v * 100.0);
    return std::string(buf);
  };
  std::cout << "  " << name << ": NC " << pct(m.nc) << "  DAC " << pct(m.dac) << "  TTC "
            << pct(m.ttc) << "  Comf " << pct(m.comfort) << "  EP " << pct(m.ep) << "  PDMS "
            << pct(m.pdms) << "  EPDMS " << pct(m.epdms) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale hierarchical world-model driving pipeline"};
  app.require_subcommand(1);

  CommonOpts opts;
  std::string out_dir, data_dir, run_dir, stage1_ckpt, planner_ckpt, resume, dataset_path,
      traj_csv;

  CLI::App* gen = app.add_subcommand("gen-data", "generate train/val/test scenario datasets");
  add_config_opts(gen, opts);
  gen->add_option("--out", out_dir, "output directory")->required();

  CLI::App* s1 = app.add_subcommand("train-stage1", "train the world model (stage 1)");
  add_config_opts(s1, opts);
  s1->add_option("--data", data_dir, "dataset directory")->required();
  s1->add_option("--out", run_dir, "run directory")->required();
  s1->add_option("--resume", resume, "resume from checkpoint");

  CLI::App* s2 = app.add_subcommand("train-stage2", "train the diffusion planner (stage 2)");
  add_config_opts(s2, opts);
  s2->add_option("--data", data_dir, "dataset directory")->required();
  s2->add_option("--stage1", stage1_ckpt, "stage-1 checkpoint")->required();
  s2->add_option("--out", run_dir, "run directory")->required();

  CLI::App* ev = app.add_subcommand("eval", "score the planner and baselines on the test split");
  add_config_opts(ev, opts);
  ev->add_option("--data", data_dir, "dataset directory")->required();
  ev->add_option("--stage1", stage1_ckpt, "stage-1 checkpoint")->required();
  ev->add_option("--planner", planner_ckpt, "planner checkpoint")->required();
  ev->add_option("--out", out_dir, "output directory")->required();

  CLI::App* ab = app.add_subcommand("ablate", "query-block and mask ablation sweep");
  add_config_opts(ab, opts);
  ab->add_option("--out", out_dir, "output directory")->required();

  CLI::App* rep = app.add_subcommand("report", "render plots and a summary for a finished run");
  rep->add_option("--run", run_dir, "run directory")->required();

  CLI::App* sc = app.add_subcommand("score", "score a trajectory CSV against a dataset");
  add_config_opts(sc, opts);
  sc->add_option("--data", dataset_path, "dataset file (.sgds)")->required();
  sc->add_option("--trajectories", traj_csv, "trajectory CSV")->required();
  sc->add_option("--out", out_dir, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    RunConfig cfg = load_config(opts.config_path, opts.overrides);

    if (gen->parsed()) {
      DatasetPaths paths = cmd_gen_data(cfg, resolve_run_path(out_dir));
      std::cout << "wrote " << paths.train << ", " << paths.val << ", " << paths.test << '\n';
    } else if (s1->parsed()) {
      Stage1Result r =
          cmd_train_stage1(cfg, resolve_run_path(data_dir), resolve_run_path(run_dir), resume);
      std::cout << "stage-1 checkpoint: " << r.checkpoint << '\n'
                << "initial loss " << r.train_curve.front().total << ", final loss "
                << r.train_curve.back().total << " after " << r.train_curve.back().epoch
                << " epochs\n";
    } else if (s2->parsed()) {
      Stage2Result r = cmd_train_stage2(cfg, resolve_run_path(data_dir), stage1_ckpt,
                                        resolve_run_path(run_dir));
      std::cout << "planner checkpoint: " << r.checkpoint << '\n'
                << "backbone checksum " << std::hex << r.backbone_checksum_before << std::dec
                << " unchanged: "
                << (r.backbone_checksum_before == r.backbone_checksum_after ? "yes" : "NO")
                << '\n';
      if (!r.curve.empty())
        std::cout << "diffusion loss " << r.curve.front()[1] << " -> " << r.curve.back()[1]
                  << '\n';
    } else if (ev->parsed()) {
      EvalResult r = cmd_eval(cfg, resolve_run_path(data_dir), stage1_ckpt, planner_ckpt,
                              resolve_run_path(out_dir));
      std::cout << "evaluated " << r.model.rows.size() << " scenarios\n";
      print_means("model            ", r.model.means);
      print_means("constant velocity", r.constant_velocity.means);
      print_means("ego-history mlp  ", r.ego_mlp.means);
      print_means("ground truth     ", r.ground_truth.means);
      std::cout << "  ade: model " << r.model_ade << "  cv " << r.cv_ade << "  mlp " << r.mlp_ade
                << "  prior " << r.prior_ade << '\n';
    } else if (ab->parsed()) {
      AblationResult r = cmd_ablate(cfg, resolve_run_path(out_dir));
      std::cout << ablation_table_text(r);
      std::cout << "full >= no-future: " << (r.full_ge_no_future ? "yes" : "no") << " (delta "
                << r.pdms_full - r.pdms_no_future << ")\n"
                << "structured EP >= causal EP - 1.0: "
                << (r.structured_ep_within_margin ? "yes" : "no") << " (delta "
                << r.ep_structured - r.ep_causal << ")\n"
                << "full >= scene-only: " << (r.full_ge_scene_only ? "yes" : "no") << " (delta "
                << r.pdms_full - r.pdms_scene_only << ")\n";
    } else if (rep->parsed()) {
      ReportPaths r = cmd_report(resolve_run_path(run_dir));
      std::cout << "wrote " << r.plots.size() << " plots and " << r.summary << '\n';
    } else if (sc->parsed()) {
      ScoreReport r = cmd_score(dataset_path, traj_csv, cfg.weights, resolve_run_path(out_dir));
      print_means("trajectories", r.means);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
