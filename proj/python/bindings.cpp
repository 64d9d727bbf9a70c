#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "agentmixer/equilibrium.hpp"
#include "agentmixer/joint.hpp"
#include "agentmixer/rng.hpp"
#include "agentmixer/runner.hpp"
#include "agentmixer/verify.hpp"

namespace py = pybind11;
using namespace agentmixer;

namespace {

// Runs a command with captured streams; returns (exit code, stdout, stderr).
template <class F>
py::tuple captured(F&& f) {
  std::ostringstream out, err;
  int code;
  {
    py::gil_scoped_release release;
    code = f(out, err);
  }
  return py::make_tuple(code, out.str(), err.str());
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.attr("__version__") = kLibraryVersion;
  m.attr("EXIT_OK") = static_cast<int>(kExitOk);
  m.attr("EXIT_VERIFY_FAILED") = static_cast<int>(kExitVerifyFailed);
  m.attr("EXIT_USAGE") = static_cast<int>(kExitUsage);
  m.attr("EXIT_NUMERIC") = static_cast<int>(kExitNumeric);

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

  m.def("git_blob_hash", &git_blob_hash, py::arg("content"));
  m.def("normalize_config", [](const std::string& text) { return serialize_config(parse_config(text)); },
        py::arg("text"), "Parse INI text and return every field with defaults filled in.");

  m.def(
      "train",
      [](const std::filesystem::path& config, std::optional<std::uint64_t> seed, std::optional<std::uint64_t> steps,
         std::optional<std::string> output) {
        TrainOptions o{seed, steps, output};
        return captured([&](std::ostream& out, std::ostream& err) { return cmd_train(config, o, out, err); });
      },
      py::arg("config"), py::arg("seed") = py::none(), py::arg("steps") = py::none(), py::arg("output") = py::none());
  m.def(
      "evaluate",
      [](const std::filesystem::path& checkpoint, const std::filesystem::path& config, int episodes) {
        return captured(
            [&](std::ostream& out, std::ostream& err) { return cmd_eval(checkpoint, config, episodes, out, err); });
      },
      py::arg("checkpoint"), py::arg("config"), py::arg("episodes") = 100);
  m.def(
      "analyze",
      [](const std::filesystem::path& checkpoint, const std::filesystem::path& config) {
        return captured([&](std::ostream& out, std::ostream& err) { return cmd_analyze(checkpoint, config, out, err); });
      },
      py::arg("checkpoint"), py::arg("config"));
  m.def(
      "verify",
      [](const std::string& suite) {
        return captured([&](std::ostream& out, std::ostream& err) { return cmd_verify(suite, out, err); });
      },
      py::arg("suite"));

  m.def(
      "analyze_product",
      [](const std::vector<std::vector<double>>& payoff, const std::vector<std::vector<double>>& marginals) {
        return analyze_product(NormalFormGame::two_player(payoff), marginals).to_json();
      },
      py::arg("payoff"), py::arg("marginals"), "Equilibrium gaps of a product policy in a two-player game, as JSON.");
  m.def(
      "temperature_degeneration_test",
      [](const std::vector<std::vector<double>>& alpha, std::size_t n_samples, const std::vector<double>& taus,
         std::uint64_t seed) {
        Rng rng(seed);
        return temperature_degeneration_test(alpha, n_samples, taus, rng);
      },
      py::arg("alpha"), py::arg("n_samples"), py::arg("taus"), py::arg("seed") = 0);
}
