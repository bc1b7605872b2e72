#include <cstdio>
#include <optional>
#include <string>

#include "../vendor/CLI11.hpp"
#include "lumos/cli.hpp"
#include "lumos/errors.hpp"

namespace lumos {

int cli_main(int argc, const char* const* argv) {
  CLI::App app{"train gated models, extract compact ones, and report on them"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<uint64_t> seed_override;
  CLI::App* train = app.add_subcommand("train", "train from a JSON config; writes checkpoint, history CSV, and gate masks");
  train->add_option("--config", config_path, "run configuration file")->required();
  train->add_option("--seed", seed_override, "override the config's root seed");

  std::string ckpt_path, out_path;
  CLI::App* extract = app.add_subcommand("extract", "extract the compact model from a checkpoint");
  extract->add_option("checkpoint", ckpt_path, "gated checkpoint (.lumc)")->required();
  extract->add_option("--out", out_path, "compact model path (.lum); masks land next to it")->required();

  std::string v_ckpt, v_compact;
  double tol = 1e-8;
  CLI::App* verify = app.add_subcommand("verify", "compare a compact model against its checkpoint");
  verify->add_option("checkpoint", v_ckpt, "gated checkpoint (.lumc)")->required();
  verify->add_option("compact", v_compact, "compact model (.lum)")->required();
  verify->add_option("--tol", tol, "max allowed absolute deviation (default 1e-8)");

  std::string r_compact, r_data, r_ckpt;
  CLI::App* report = app.add_subcommand("report", "metrics and per-feature correlations on a dataset");
  report->add_option("compact", r_compact, "compact model (.lum)")->required();
  report->add_option("dataset", r_data, "dataset (.csv/.lumt/.json)")->required();
  report->add_option("--checkpoint", r_ckpt, "gated checkpoint for before/after counts");

  std::string g_kind, g_out;
  uint64_t g_seed = 1;
  int64_t g_n = 100;
  CLI::App* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  gen->add_option("kind", g_kind, "sparse16 | image | graph")->required();
  gen->add_option("--seed", g_seed, "generator seed (default 1)");
  gen->add_option("--n", g_n, "sample count (default 100)");
  gen->add_option("--out", g_out, "output path (.csv/.lumt for dense, .json for graph)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (train->parsed()) {
      uint64_t seed_val = seed_override.value_or(0);
      return run_train(config_path, seed_override ? &seed_val : nullptr);
    }
    if (extract->parsed()) return run_extract(ckpt_path, out_path);
    if (verify->parsed()) return run_verify(v_ckpt, v_compact, tol);
    if (report->parsed()) return run_report(r_compact, r_data, r_ckpt);
    if (gen->parsed()) return run_gen(g_kind, g_seed, g_n, g_out);
  } catch (const io_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitIo;
  } catch (const numeric_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitNumeric;
  } catch (const config_error& e) {  // shape/consistency/topology derive from it
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitValidation;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitValidation;
  }
  return kExitValidation;
}

}  // namespace lumos
