#include "pfa/spectral.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "pfa/parallel.hpp"

namespace pfa {

using json = nlohmann::ordered_json;

namespace {

constexpr double kDegenerateTrace = 1e-12;
constexpr double kEigenClamp = 1e-12;  // relative to the largest eigenvalue

template <typename T>
void pool_into(const NdArray<T>& t, PoolMode mode, Eigen::MatrixXd& out) {
  const std::size_t m = t.shape[0];
  if (t.rank() == 2) {
    const std::size_t c = t.shape[1];
    out.resize(m, c);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < c; ++j) out(i, j) = t(i, j);
    return;
  }
  const std::size_t h = t.shape[1], w = t.shape[2], c = t.shape[3];
  out.resize(m, c);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t k = 0; k < c; ++k) {
      if (mode == PoolMode::Max) {
        double best = t(i, 0, 0, k);
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t x = 0; x < w; ++x)
            best = std::max(best, static_cast<double>(t(i, y, x, k)));
        out(i, k) = best;
      } else {
        double sum = 0.0;
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t x = 0; x < w; ++x) sum += t(i, y, x, k);
        out(i, k) = sum / static_cast<double>(h * w);
      }
    }
  }
}

}  // namespace

ResponseMatrix pool_responses(const std::string& layer_id, const TensorData& tensor,
                              PoolMode mode) {
  const auto& shape = tensor_shape(tensor);
  if (shape.size() != 2 && shape.size() != 4)
    fail(ErrorCode::InvalidShape,
         "layer '" + layer_id + "': expected [M,C] or [M,H,W,C], got " + shape_to_string(shape));
  if (shape[0] < 2)
    fail(ErrorCode::InvalidShape,
         "layer '" + layer_id + "': need at least 2 samples, got " + std::to_string(shape[0]));
  if (!tensor_all_finite(tensor))
    fail(ErrorCode::InvalidInput, "layer '" + layer_id + "': non-finite activation values");

  ResponseMatrix r;
  r.layer_id = layer_id;
  std::visit([&](const auto& t) { pool_into(t, mode, r.data); }, tensor);
  return r;
}

Spectrum compute_spectrum(const ResponseMatrix& responses) {
  const Eigen::Index m = responses.data.rows();
  const Eigen::Index c = responses.data.cols();
  if (m < 2) fail(ErrorCode::InvalidInput, "layer '" + responses.layer_id + "': need M >= 2 samples");
  if (c < 1) fail(ErrorCode::InvalidInput, "layer '" + responses.layer_id + "': empty response matrix");
  if (!responses.data.allFinite())
    fail(ErrorCode::InvalidInput, "layer '" + responses.layer_id + "': non-finite responses");

  Spectrum s;
  s.layer_id = responses.layer_id;

  const Eigen::RowVectorXd mean = responses.data.colwise().mean();
  const Eigen::MatrixXd centered = responses.data.rowwise() - mean;
  const Eigen::MatrixXd cov =
      centered.transpose() * centered / static_cast<double>(m - 1);

  if (cov.trace() < kDegenerateTrace) {
    s.values = Eigen::VectorXd::Zero(c);
    s.degenerate = true;
    return s;
  }

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov, Eigen::EigenvaluesOnly);
  if (solver.info() != Eigen::Success)
    fail(ErrorCode::NumericalFailure,
         "eigendecomposition failed for layer '" + responses.layer_id + "'");

  s.values = solver.eigenvalues().reverse();  // descending
  const double top = s.values(0);
  for (Eigen::Index i = 0; i < c; ++i)
    if (s.values(i) < kEigenClamp * top) s.values(i) = 0.0;

  const double total = s.values.sum();
  if (!(total > 0.0))
    fail(ErrorCode::NumericalFailure,
         "all eigenvalues clamped to zero for layer '" + responses.layer_id + "'");
  s.values /= total;
  return s;
}

double kl_to_uniform(const Spectrum& spectrum) {
  if (spectrum.degenerate)
    fail(ErrorCode::DegenerateSpectrum,
         "layer '" + spectrum.layer_id + "' has a degenerate spectrum");
  const Eigen::Index c = spectrum.values.size();
  double sum = 0.0;
  for (Eigen::Index i = 0; i < c; ++i) {
    const double v = spectrum.values(i);
    if (v > 0.0) sum += v * std::log(v * static_cast<double>(c));
  }
  return std::max(0.0, sum);
}

SpectraSet analyze_dump(const ActivationDump& dump, PoolMode mode, int threads) {
  SpectraSet set;
  set.source = dump.manifest_path.string();
  set.pooling = mode;
  set.layers.resize(dump.layers.size());
  parallel_for(dump.layers.size(), thread_budget(threads), [&](std::size_t i) {
    const TensorData t = load_dump_tensor(dump.layers[i]);
    set.layers[i] = compute_spectrum(pool_responses(dump.layers[i].layer_id, t, mode));
  });
  return set;
}

const Spectrum* find_spectrum(const SpectraSet& set, const std::string& layer_id) {
  for (const Spectrum& s : set.layers)
    if (s.layer_id == layer_id) return &s;
  return nullptr;
}

SpectraSet load_spectra(const std::filesystem::path& path) {
  const std::string text = read_text_file(path);
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) fail(ErrorCode::ParseError, "malformed spectra file: " + path.string());
  if (j.value("version", std::string()) != "pfa/1" ||
      j.value("kind", std::string()) != "spectra")
    fail(ErrorCode::ParseError, "not a pfa/1 spectra file: " + path.string());

  SpectraSet set;
  set.source = j.value("source", std::string());
  const std::string pool = j.value("pooling", std::string("max"));
  if (pool != "max" && pool != "avg")
    fail(ErrorCode::ParseError, "spectra pooling must be max|avg");
  set.pooling = pool == "max" ? PoolMode::Max : PoolMode::Avg;

  try {
    for (const auto& e : j.at("layers")) {
      Spectrum s;
      s.layer_id = e.at("layer").get<std::string>();
      s.degenerate = e.value("degenerate", false);
      const auto& vals = e.at("values");
      s.values = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(vals.size()));
      for (std::size_t i = 0; i < vals.size(); ++i) s.values(static_cast<Eigen::Index>(i)) = vals[i].get<double>();
      if (s.values.size() == 0)
        fail(ErrorCode::ParseError, "spectrum for '" + s.layer_id + "' is empty");
      if (!s.degenerate) {
        for (Eigen::Index i = 0; i + 1 < s.values.size(); ++i)
          if (s.values(i) < s.values(i + 1))
            fail(ErrorCode::ParseError, "spectrum for '" + s.layer_id + "' is not sorted");
        if (std::abs(s.values.sum() - 1.0) > 1e-9)
          fail(ErrorCode::ParseError, "spectrum for '" + s.layer_id + "' does not sum to 1");
      }
      set.layers.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::ParseError, path.string() + ": " + e.what());
  }
  return set;
}

void save_spectra(const SpectraSet& set, const std::filesystem::path& path) {
  json j;
  j["version"] = "pfa/1";
  j["kind"] = "spectra";
  j["source"] = set.source;
  j["pooling"] = set.pooling == PoolMode::Max ? "max" : "avg";
  j["layers"] = json::array();
  for (const Spectrum& s : set.layers) {
    json e;
    e["layer"] = s.layer_id;
    e["channels"] = s.values.size();
    e["degenerate"] = s.degenerate;
    if (s.degenerate)
      e["kl_to_uniform"] = nullptr;
    else
      e["kl_to_uniform"] = kl_to_uniform(s);
    e["values"] = json::array();
    for (Eigen::Index i = 0; i < s.values.size(); ++i) e["values"].push_back(s.values(i));
    j["layers"].push_back(std::move(e));
  }
  write_file_atomic(path, j.dump(2) + "\n");
}

}  // namespace pfa
