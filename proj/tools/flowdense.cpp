#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "flowdense/cli.hpp"

namespace {

std::vector<double> parse_times(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    std::size_t used = 0;
    double v = std::stod(tok, &used);
    if (used != tok.size()) throw std::invalid_argument(tok);
    out.push_back(v);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  namespace cli = flowdense::cli;
  CLI::App app{"flowdense: density estimation with geodesic flows of diffeomorphisms"};
  app.require_subcommand(1);

  std::string config, model, data, figure, outdir, times = "0,0.5,1";
  int grid = 200;
  long long m = 0;
  std::uint64_t seed = 0;

  auto* fit = app.add_subcommand("fit", "fit a density estimate from a JSON config");
  fit->add_option("config", config, "config file")->required();

  auto* diag = app.add_subcommand("diagnose", "Euler-Lagrange and Stein diagnostics of a fitted model");
  diag->add_option("model", model, "model.json")->required();
  diag->add_option("data", data, "data CSV")->required();
  diag->add_option("--times", times, "comma-separated times in [0, 1]");
  diag->add_option("--grid", grid, "probe grid size");
  diag->add_option("--out", outdir, "output directory")->default_val(".");

  auto* semi = app.add_subcommand("semifit", "semiparametric fit from a JSON config");
  semi->add_option("config", config, "config file")->required();

  auto* rep = app.add_subcommand("reproduce", "regenerate the data behind a figure");
  rep->add_option("figure", figure, "fig2, fig3 or fig4")->required()->check(CLI::IsMember({"fig2", "fig3", "fig4"}));
  rep->add_option("outdir", outdir, "output directory")->required();

  auto* samp = app.add_subcommand("sample", "draw from a fitted model");
  samp->add_option("model", model, "model.json")->required();
  samp->add_option("--m", m, "number of draws")->required();
  samp->add_option("--seed", seed, "random seed")->default_val(0);
  samp->add_option("--out", outdir, "output directory")->default_val(".");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : cli::kConfig;
  }

  if (*fit) return cli::cmd_fit(config);
  if (*diag) {
    std::vector<double> t;
    try {
      t = parse_times(times);
    } catch (const std::exception&) {
      std::cerr << "config error: cannot parse --times '" << times << "'\n";
      return cli::kConfig;
    }
    return cli::cmd_diagnose(model, data, t, grid, outdir);
  }
  if (*semi) return cli::cmd_semifit(config);
  if (*rep) return cli::cmd_reproduce(figure, outdir);
  if (*samp) return cli::cmd_sample(model, m, seed, outdir);
  return cli::kConfig;
}
