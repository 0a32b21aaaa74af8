// Command-line driver: fit density models, run the greedy approximation
// algorithm, and batch the simulation studies.
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dpp/approx.hpp"
#include "dpp/estimate.hpp"
#include "dpp/simulate.hpp"

namespace {

using namespace dpp;

std::vector<double> parse_doubles(const std::string& text, const char* flag) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(cell, &used));
      if (used != cell.size()) throw std::invalid_argument(cell);
    } catch (const std::exception&) {
      throw std::invalid_argument(std::string("bad value '") + cell + "' in " + flag);
    }
  }
  if (out.empty()) throw std::invalid_argument(std::string("empty list for ") + flag);
  return out;
}

std::vector<int> parse_ints(const std::string& text, const char* flag) {
  std::vector<int> out;
  for (double v : parse_doubles(text, flag)) {
    if (v != std::floor(v)) throw std::invalid_argument(std::string("expected integers in ") + flag);
    out.push_back(static_cast<int>(v));
  }
  return out;
}

double parse_q(const std::string& text) {
  if (text == "inf" || text == "infinity") return std::numeric_limits<double>::infinity();
  try {
    return std::stod(text);
  } catch (const std::exception&) {
    throw std::invalid_argument("bad value for --q");
  }
}

// sample sizes, either a comma list or "lo:hi" doubling
std::vector<std::size_t> parse_schedule(const std::string& text) {
  std::vector<std::size_t> out;
  const auto colon = text.find(':');
  if (colon != std::string::npos) {
    const std::size_t lo = std::stoull(text.substr(0, colon));
    const std::size_t hi = std::stoull(text.substr(colon + 1));
    if (lo < 4 || hi < lo) throw std::invalid_argument("bad --n-schedule range");
    for (std::size_t n = lo; n <= hi; n *= 2) out.push_back(n);
    return out;
  }
  for (int v : parse_ints(text, "--n-schedule")) {
    if (v < 4) throw std::invalid_argument("sample sizes must be at least 4");
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

std::ostream& open_output(std::ofstream& file, const std::string& path) {
  if (path.empty() || path == "-") return std::cout;
  file.open(path);
  if (!file) throw IoError("cannot write '" + path + "'");
  return file;
}

struct NamedTarget {
  Target target;
  int d;
  std::string description;
};

NamedTarget make_target(const std::string& name) {
  if (name == "cascade")
    return {cascade_target({1.0}), 1, "piecewise-linear cascade, smoothness one"};
  if (name == "aniso-cascade")
    return {cascade_target({1.0, 2.0}), 2, "anisotropic cascade pair, smoothness (1,2)"};
  if (name == "poly") {
    PiecewisePoly poly(PartitionTree::leaf(),
                       {LeafPoly{DyadicRectangle(1), {2}, {1.0, 0.3, 0.1}}});
    return {Target(std::move(poly)), 1, "global quadratic"};
  }
  if (name == "cusp")
    return {Target([](std::span<const double> x) { return std::sqrt(std::abs(x[0] - 0.5)); }),
            1, "square-root cusp at 1/2"};
  if (name == "sine")
    return {Target([](std::span<const double> x) { return std::sin(6.0 * x[0]); }), 1,
            "smooth sine"};
  if (name == "step-smooth")
    return {Target([](std::span<const double> x) {
              return x[0] > 0.5 ? std::sin(4.0 * x[0]) : 0.0;
            }),
            1, "smooth branch with a jump at 1/2"};
  if (name == "aniso")
    return {Target([](std::span<const double> x) {
              return std::sqrt(std::abs(x[0] - 0.5)) +
                     std::pow(std::abs(x[1] - 0.5), 1.5);
            }),
            2, "anisotropic cusp pair"};
  if (name == "peak2d")
    return {Target([](std::span<const double> x) {
              const double dx = x[0] - 0.4, dy = x[1] - 0.6;
              return std::exp(-8.0 * (dx * dx + dy * dy));
            }),
            2, "smooth bump"};
  throw std::invalid_argument("unknown target '" + name +
                              "' (try: poly, cusp, sine, cascade, aniso-cascade, step-smooth, aniso, peak2d)");
}

void print_tree(std::ostream& os, const PiecewisePoly& poly) {
  const auto& nodes = poly.tree().nodes();
  int leaf_ordinal = 0;
  auto walk = [&](auto&& self, std::int32_t node, const DyadicRectangle& rect,
                  int depth) -> void {
    for (int i = 0; i < depth; ++i) os << "  ";
    if (nodes[static_cast<std::size_t>(node)].axis < 0) {
      const auto& lp = poly.leaves()[static_cast<std::size_t>(leaf_ordinal++)];
      double norm = 0.0;
      for (double c : lp.coeffs) norm += c * c;
      os << "leaf " << rect.to_string() << " degrees=(";
      for (std::size_t l = 0; l < lp.degrees.size(); ++l)
        os << (l ? "," : "") << lp.degrees[l];
      char buf[64];
      std::snprintf(buf, sizeof buf, ") |coeff|=%.6g", std::sqrt(norm));
      os << buf << "\n";
      return;
    }
    const int axis = nodes[static_cast<std::size_t>(node)].axis;
    os << "cut axis " << axis + 1 << "\n";
    auto [lo, hi] = rect.split(axis);
    self(self, nodes[static_cast<std::size_t>(node)].left, lo, depth + 1);
    self(self, nodes[static_cast<std::size_t>(node)].right, hi, depth + 1);
  };
  walk(walk, 0, DyadicRectangle(poly.dim()), 0);
}

std::string model_summary(const FittedModel& model) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "n=%zu d=%d J*=%d |m|=%zu criterion=%.12g", model.n(),
                model.dim(), model.config().j_star, model.density().leaves().size(),
                model.diagnostics().criterion);
  return buf;
}

// ---------------------------------------------------------------------------

int cmd_fit(const std::string& input, int d, const std::string& rstar_text,
            const std::string& kappa_text, const std::string& jstar_text,
            const std::string& preset_text, const std::string& out) {
  FitOptions opt;
  if (preset_text == "log")
    opt.preset = DegreePreset::LogN;
  else if (preset_text != "constant")
    throw std::invalid_argument("--preset must be 'constant' or 'log'");
  if (!rstar_text.empty()) {
    const auto rs = parse_ints(rstar_text, "--rstar");
    opt.r_star.assign(rs.begin(), rs.end());
  }
  if (!kappa_text.empty()) {
    const auto ks = parse_doubles(kappa_text, "--kappa");
    if (ks.size() != 5) throw std::invalid_argument("--kappa needs exactly 5 values");
    std::copy(ks.begin(), ks.end(), opt.kappa.begin());
  }
  if (jstar_text != "auto") {
    try {
      opt.j_star = std::stoi(jstar_text);
    } catch (const std::exception&) {
      throw std::invalid_argument("--jstar must be 'auto' or an integer");
    }
  }
  const Sample sample = read_sample_csv(input, d);
  const FittedModel model = fit(sample, opt);
  if (!out.empty()) model.save(out);
  std::cout << "fit: " << model_summary(model) << "\n";
  if (model.diagnostics().j_star_floor_warning)
    std::cerr << "warning: even J* = 0 violates the depth bound for this n\n";
  return 0;
}

int cmd_approx(const std::string& target_name, const std::string& sigma_text,
               const std::string& r_text, const std::string& q_text, double eps,
               const std::string& sweep_text, double R_override, double p,
               const std::string& out) {
  const NamedTarget target = make_target(target_name);
  const auto sigma = parse_doubles(sigma_text, "--sigma");
  if (static_cast<int>(sigma.size()) != target.d)
    throw std::invalid_argument("--sigma length does not match the target dimension");
  const auto rs = parse_ints(r_text, "--r");
  if (rs.size() != sigma.size())
    throw std::invalid_argument("--r length does not match --sigma");
  ApproxConfig cfg{AnisoFamily(sigma), DegreeVector(rs.begin(), rs.end()), parse_q(q_text),
                   eps > 0 ? eps : 1e-3, {}, {}, 1 << 22};
  cfg.validate();

  std::ofstream file;
  std::ostream& os = open_output(file, out);

  if (sweep_text.empty()) {
    const auto res = greedy_partition(target.target, cfg);
    os << "# greedy approximation of '" << target_name << "' (" << target.description
       << ")\n";
    char buf[160];
    std::snprintf(buf, sizeof buf, "# q=%g eps=%g cells=%zu total_error=%.12g\n", cfg.q,
                  cfg.epsilon, res.partition.size(), res.total_error);
    os << buf << "level,rect,error\n";
    for (const auto& cell : res.partition)
      os << cell.level << "," << cell.rect.to_string() << "," << cell.error << "\n";
    std::cout << "approx: cells=" << res.partition.size()
              << " total_error=" << res.total_error << "\n";
    return 0;
  }

  const auto range = parse_ints(sweep_text, "--k-sweep");
  if (range.size() != 2 || range[0] < 0 || range[1] < range[0])
    throw std::invalid_argument("--k-sweep needs kmin,kmax with 0 <= kmin <= kmax");
  double R = R_override;
  if (!(R > 0.0)) {
    const auto rep =
        seminorm(target.target, cfg, p, std::numeric_limits<double>::infinity(),
                 std::min(range[1], 6));
    R = rep.seminorm;
  }
  const auto schedule = eps_schedule_from_k(cfg, R, p, range[0], range[1]);
  const auto table = rate_experiment(target.target, cfg, schedule);
  os << "# greedy rate sweep of '" << target_name << "' R=" << R << " p=" << p << "\n";
  os << rate_table_csv(table, cfg);
  std::cout << "approx sweep: slope=" << table.slope << "\n";
  return 0;
}

int cmd_rates(const std::string& truth_name, int d, const std::string& schedule_text,
              int replicates, const std::string& sigma_text, const std::string& rstar_text,
              std::uint64_t seed, int threads, const std::string& out) {
  const TestDensity truth = TestDensity::builtin(truth_name, d);
  const auto sigma = parse_doubles(sigma_text, "--sigma");
  if (static_cast<int>(sigma.size()) != truth.dim())
    throw std::invalid_argument("--sigma length does not match the truth dimension");
  const auto schedule = parse_schedule(schedule_text);
  FitOptions opt;
  if (!rstar_text.empty()) {
    const auto rs = parse_ints(rstar_text, "--rstar");
    opt.r_star.assign(rs.begin(), rs.end());
  }
  const RateStudy study =
      rate_study(truth, AnisoFamily(sigma), schedule, replicates, opt, seed, threads);

  std::ofstream file;
  std::ostream& os = open_output(file, out);
  os << "# estimation rate study truth='" << truth_name << "' replicates=" << replicates
     << " seed=" << seed << " rng=" << study.rng << "\n";
  os << "n,mean_risk,stderr\n";
  for (const auto& row : study.rows)
    os << row.n << "," << row.mean << "," << row.stderr_mean << "\n";
  char buf[128];
  std::snprintf(buf, sizeof buf, "# slope=%.6f target_exponent=%.6f\n", study.slope,
                study.target_exponent);
  os << buf;
  std::cout << "rates: slope=" << study.slope
            << " target=" << study.target_exponent << "\n";
  return 0;
}

int cmd_calibrate(const std::string& grid_text, const std::string& truths_text, int d,
                  std::size_t n, int replicates, const std::string& rstar_text, int jstar,
                  std::uint64_t seed, int threads, const std::string& out) {
  std::vector<std::array<double, 5>> grid;
  std::stringstream ss(grid_text);
  std::string row;
  while (std::getline(ss, row, ';')) {
    const auto vals = parse_doubles(row, "--grid");
    if (vals.size() != 5) throw std::invalid_argument("each --grid row needs 5 kappas");
    std::array<double, 5> k{};
    std::copy(vals.begin(), vals.end(), k.begin());
    grid.push_back(k);
  }
  std::vector<TestDensity> suite;
  std::stringstream ts(truths_text);
  std::string name;
  while (std::getline(ts, name, ','))
    if (!name.empty()) suite.push_back(TestDensity::builtin(name, d));
  PenaltyConfig family;
  const auto rs = parse_ints(rstar_text, "--rstar");
  family.r_star.assign(rs.begin(), rs.end());
  family.j_star = jstar;

  const auto res = calibrate(grid, suite, n, replicates, family, seed, threads);
  std::ofstream file;
  std::ostream& os = open_output(file, out);
  os << "# penalty calibration n=" << n << " replicates=" << replicates
     << " seed=" << seed << "\n";
  os << "kappa1,kappa2,kappa3,kappa4,kappa5,mean_ratio\n";
  for (const auto& r : res.rows) {
    for (double k : r.kappa) os << k << ",";
    os << r.mean_ratio << "\n";
  }
  os << "# best=";
  for (std::size_t i = 0; i < 5; ++i) os << (i ? "," : "") << res.best[i];
  os << "\n";
  std::cout << "calibrate: best=";
  for (std::size_t i = 0; i < 5; ++i) std::cout << (i ? "," : "") << res.best[i];
  std::cout << "\n";
  return 0;
}

int cmd_sample(const std::string& density_name, int d, std::size_t n, std::uint64_t seed,
               const std::string& out) {
  const TestDensity density = TestDensity::builtin(density_name, d);
  const Sample sample = sample_density(density, n, seed);
  if (out.empty() || out == "-") {
    for (std::size_t i = 0; i < sample.size(); ++i) {
      const auto pt = sample.point(i);
      for (int l = 0; l < sample.dim(); ++l)
        std::cout << (l ? "," : "") << pt[static_cast<std::size_t>(l)];
      std::cout << "\n";
    }
  } else {
    write_sample_csv(out, sample);
  }
  std::cerr << "sample: density='" << density_name << "' n=" << n << " seed=" << seed
            << " rng=" << CounterRng::kName << "\n";
  return 0;
}

int cmd_inspect(const std::string& path) {
  const FittedModel model = FittedModel::load(path);
  std::cout << "model: " << model_summary(model) << "\n";
  char buf[160];
  std::snprintf(buf, sizeof buf, "diagnostics: M1*=%.6g M2*=%.6g L=%.6g\n",
                model.diagnostics().m1_star, model.diagnostics().m2_star,
                model.config().weight_L());
  std::cout << buf;
  print_tree(std::cout, model.density());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dyadic piecewise polynomial approximation and density estimation"};
  app.require_subcommand(1);

  // fit
  auto* fit_cmd = app.add_subcommand("fit", "fit a density model to CSV points");
  std::string fit_input, fit_rstar, fit_kappa, fit_out;
  std::string fit_jstar = "auto", fit_preset = "constant";
  int fit_d = 0;
  fit_cmd->add_option("--input", fit_input, "points CSV, one row per observation")->required();
  fit_cmd->add_option("--d", fit_d, "dimension (0: infer from the file)");
  fit_cmd->add_option("--rstar", fit_rstar, "maximal degrees, comma separated");
  fit_cmd->add_option("--kappa", fit_kappa, "five penalty constants");
  fit_cmd->add_option("--jstar", fit_jstar, "depth cap, 'auto' or an integer");
  fit_cmd->add_option("--preset", fit_preset, "degree preset: constant | log");
  fit_cmd->add_option("--out", fit_out, "model file to write");

  // approx
  auto* approx_cmd = app.add_subcommand("approx", "run the greedy approximation");
  std::string ap_target, ap_sigma = "1", ap_r = "1", ap_q = "2", ap_sweep, ap_out;
  double ap_eps = 0.0, ap_R = 0.0, ap_p = 2.0;
  approx_cmd->add_option("--target", ap_target, "builtin target name")->required();
  approx_cmd->add_option("--sigma", ap_sigma, "smoothness indices, comma separated");
  approx_cmd->add_option("--r", ap_r, "per-axis maximal degrees");
  approx_cmd->add_option("--q", ap_q, "error norm: a number or 'inf'");
  approx_cmd->add_option("--eps", ap_eps, "refinement threshold");
  approx_cmd->add_option("--k-sweep", ap_sweep, "kmin,kmax threshold sweep");
  approx_cmd->add_option("--R", ap_R, "class radius for the sweep (default: measured)");
  approx_cmd->add_option("--p", ap_p, "smoothness norm index for the sweep");
  approx_cmd->add_option("--out", ap_out, "output CSV ('-' for stdout)");

  // rates
  auto* rates_cmd = app.add_subcommand("rates", "estimation risk against sample size");
  std::string rt_truth, rt_schedule = "512:16384", rt_sigma = "1", rt_rstar, rt_out;
  int rt_d = 1, rt_reps = 50, rt_threads = 1;
  std::uint64_t rt_seed = 1;
  rates_cmd->add_option("--truth", rt_truth, "builtin density name")->required();
  rates_cmd->add_option("--d", rt_d, "dimension for d-parametric densities");
  rates_cmd->add_option("--n-schedule", rt_schedule, "comma list or lo:hi doubling");
  rates_cmd->add_option("--replicates", rt_reps, "replicates per sample size");
  rates_cmd->add_option("--sigma", rt_sigma, "declared smoothness of the truth");
  rates_cmd->add_option("--rstar", rt_rstar, "maximal degrees for the fits");
  rates_cmd->add_option("--seed", rt_seed, "master seed");
  rates_cmd->add_option("--threads", rt_threads, "worker threads");
  rates_cmd->add_option("--out", rt_out, "output CSV ('-' for stdout)");

  // calibrate
  auto* cal_cmd = app.add_subcommand("calibrate", "grid-search the penalty constants");
  std::string cal_grid, cal_truths = "step,tent,jump-linear", cal_rstar = "1", cal_out;
  int cal_d = 1, cal_reps = 10, cal_jstar = 2, cal_threads = 1;
  std::size_t cal_n = 500;
  std::uint64_t cal_seed = 1;
  cal_cmd->add_option("--grid", cal_grid, "semicolon-separated kappa 5-tuples")->required();
  cal_cmd->add_option("--truths", cal_truths, "comma list of builtin densities");
  cal_cmd->add_option("--d", cal_d, "dimension");
  cal_cmd->add_option("--n", cal_n, "sample size per replicate");
  cal_cmd->add_option("--replicates", cal_reps, "replicates per grid point");
  cal_cmd->add_option("--rstar", cal_rstar, "maximal degrees of the family");
  cal_cmd->add_option("--jstar", cal_jstar, "depth cap of the family");
  cal_cmd->add_option("--seed", cal_seed, "master seed");
  cal_cmd->add_option("--threads", cal_threads, "worker threads");
  cal_cmd->add_option("--out", cal_out, "output CSV ('-' for stdout)");

  // sample
  auto* sample_cmd = app.add_subcommand("sample", "draw points from a builtin density");
  std::string sm_density, sm_out;
  int sm_d = 1;
  std::size_t sm_n = 1000;
  std::uint64_t sm_seed = 1;
  sample_cmd->add_option("--density", sm_density, "builtin density name")->required();
  sample_cmd->add_option("--d", sm_d, "dimension for d-parametric densities");
  sample_cmd->add_option("--n", sm_n, "number of points");
  sample_cmd->add_option("--seed", sm_seed, "seed");
  sample_cmd->add_option("--out", sm_out, "CSV to write ('-' for stdout)");

  // inspect
  auto* inspect_cmd = app.add_subcommand("inspect", "pretty-print a model file");
  std::string in_model;
  inspect_cmd->add_option("model", in_model, "model JSON file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 3;
  }

  try {
    if (app.got_subcommand(fit_cmd))
      return cmd_fit(fit_input, fit_d, fit_rstar, fit_kappa, fit_jstar, fit_preset, fit_out);
    if (app.got_subcommand(approx_cmd))
      return cmd_approx(ap_target, ap_sigma, ap_r, ap_q, ap_eps, ap_sweep, ap_R, ap_p, ap_out);
    if (app.got_subcommand(rates_cmd))
      return cmd_rates(rt_truth, rt_d, rt_schedule, rt_reps, rt_sigma, rt_rstar, rt_seed,
                       rt_threads, rt_out);
    if (app.got_subcommand(cal_cmd))
      return cmd_calibrate(cal_grid, cal_truths, cal_d, cal_n, cal_reps, cal_rstar,
                           cal_jstar, cal_seed, cal_threads, cal_out);
    if (app.got_subcommand(sample_cmd))
      return cmd_sample(sm_density, sm_d, sm_n, sm_seed, sm_out);
    if (app.got_subcommand(inspect_cmd)) return cmd_inspect(in_model);
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
