#pragma once

// Portable export of per-head attention data.
//
// A directory holds manifest.json plus raw little-endian float32 blobs in
// row-major order. The manifest is written last and its presence marks a
// complete export.

#include "cmrhead/toy_model.hpp"

#include <json.hpp>

#include <bit>
#include <filesystem>
#include <fstream>

namespace cmrhead {

static_assert(std::endian::native == std::endian::little, "blob I/O assumes a little-endian host");

inline constexpr int kExportFormatVersion = 1;
inline constexpr const char* kManifestName = "manifest.json";

using Shape = std::vector<std::size_t>;

struct HeadEntry {
  int layer = 0;
  int head = 0;
  std::string scores_file;
  Shape scores_shape;
  std::optional<std::string> pattern_file;
  Shape pattern_shape;
  std::optional<std::string> kernel_file;
  Shape kernel_shape;
};

struct ExportManifest {
  int format_version = kExportFormatVersion;
  std::string model_name;
  int n_layers = 0;
  int n_heads = 0;
  int d_head = 0;
  std::vector<std::int64_t> prompt_tokens;
  std::string extraction_timestamp;
  std::vector<HeadEntry> heads;

  /// Number of unique tokens N in the [BOS, x_1..x_N, x_1..x_N] prompt.
  std::size_t n_repeat() const { return (prompt_tokens.size() - 1) / 2; }
};

struct LoadedHead {
  HeadId id;
  AttentionMatrix scores;
  std::optional<AttentionMatrix> pattern;
  std::optional<CopyKernel> kernel;
};

struct LoadedExport {
  ExportManifest manifest;
  std::vector<LoadedHead> heads;
};

namespace detail {

inline std::size_t shape_elems(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline nlohmann::json head_to_json(const HeadEntry& h) {
  nlohmann::json j{{"layer", h.layer},
                   {"head", h.head},
                   {"scores_file", h.scores_file},
                   {"scores_shape", h.scores_shape}};
  if (h.pattern_file) {
    j["pattern_file"] = *h.pattern_file;
    j["pattern_shape"] = h.pattern_shape;
  }
  if (h.kernel_file) {
    j["kernel_file"] = *h.kernel_file;
    j["kernel_shape"] = h.kernel_shape;
  }
  return j;
}

template <class T>
T field(const nlohmann::json& j, const std::string& key, const std::string& where) {
  if (!j.is_object() || !j.contains(key))
    throw data_error("manifest: missing field '" + where + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw data_error("manifest: field '" + where + key + "' has the wrong type");
  }
}

}  // namespace detail

inline std::string manifest_to_string(const ExportManifest& m) {
  nlohmann::json heads = nlohmann::json::array();
  for (const auto& h : m.heads) heads.push_back(detail::head_to_json(h));
  const nlohmann::json j{{"format_version", m.format_version},
                         {"model_name", m.model_name},
                         {"n_layers", m.n_layers},
                         {"n_heads", m.n_heads},
                         {"d_head", m.d_head},
                         {"prompt_tokens", m.prompt_tokens},
                         {"extraction_timestamp", m.extraction_timestamp},
                         {"heads", heads}};
  return j.dump(2) + "\n";
}

inline ExportManifest parse_manifest(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw data_error(std::string("manifest: invalid JSON: ") + e.what());
  }
  using detail::field;
  ExportManifest m;
  m.format_version = field<int>(j, "format_version", "");
  if (m.format_version != kExportFormatVersion)
    throw data_error("manifest: unsupported format_version " + std::to_string(m.format_version));
  m.model_name = field<std::string>(j, "model_name", "");
  m.n_layers = field<int>(j, "n_layers", "");
  m.n_heads = field<int>(j, "n_heads", "");
  m.d_head = field<int>(j, "d_head", "");
  m.prompt_tokens = field<std::vector<std::int64_t>>(j, "prompt_tokens", "");
  m.extraction_timestamp = field<std::string>(j, "extraction_timestamp", "");
  const auto heads = field<nlohmann::json>(j, "heads", "");
  if (!heads.is_array()) throw data_error("manifest: field 'heads' has the wrong type");
  for (std::size_t i = 0; i < heads.size(); ++i) {
    const std::string where = "heads[" + std::to_string(i) + "].";
    const auto& hj = heads[i];
    HeadEntry h;
    h.layer = field<int>(hj, "layer", where);
    h.head = field<int>(hj, "head", where);
    h.scores_file = field<std::string>(hj, "scores_file", where);
    h.scores_shape = field<Shape>(hj, "scores_shape", where);
    if (hj.contains("pattern_file")) {
      h.pattern_file = field<std::string>(hj, "pattern_file", where);
      h.pattern_shape = field<Shape>(hj, "pattern_shape", where);
    }
    if (hj.contains("kernel_file")) {
      h.kernel_file = field<std::string>(hj, "kernel_file", where);
      h.kernel_shape = field<Shape>(hj, "kernel_shape", where);
    }
    m.heads.push_back(std::move(h));
  }
  return m;
}

inline ExportManifest read_manifest(const std::filesystem::path& dir) {
  const auto path = dir / kManifestName;
  std::ifstream is(path);
  if (!is) throw data_error("no manifest in " + dir.string());
  std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return parse_manifest(text);
}

inline void write_blob(const std::filesystem::path& path, const Matrix& m) {
  std::vector<float> buf(static_cast<std::size_t>(m.size()));
  std::size_t k = 0;
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) buf[k++] = static_cast<float>(m(r, c));
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!os) throw data_error("cannot write " + path.string());
}

/// Reads a 2-D blob; the byte length must equal 4 x prod(shape).
inline Matrix read_blob(const std::filesystem::path& path, const Shape& shape) {
  if (shape.size() != 2) throw data_error(path.filename().string() + ": expected a 2-D shape");
  std::error_code ec;
  const auto bytes = std::filesystem::file_size(path, ec);
  if (ec) throw data_error("missing blob " + path.string());
  const std::size_t n = detail::shape_elems(shape);
  if (bytes != 4 * n)
    throw data_error(path.filename().string() + ": byte length " + std::to_string(bytes) +
                     " does not match shape (" + std::to_string(4 * n) + " expected)");
  std::vector<float> buf(n);
  std::ifstream is(path, std::ios::binary);
  if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(4 * n)))
    throw data_error("cannot read " + path.string());
  Matrix m(static_cast<Eigen::Index>(shape[0]), static_cast<Eigen::Index>(shape[1]));
  std::size_t k = 0;
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = buf[k++];
  return m;
}

/// Structural checks of a manifest against the files in `dir`.
inline void validate_export(const std::filesystem::path& dir, const ExportManifest& m) {
  const std::size_t T = m.prompt_tokens.size();
  if (T < 3 || T % 2 == 0) throw data_error("manifest: prompt length must be 2N + 1");
  for (std::size_t k = 1; k <= m.n_repeat(); ++k)
    if (m.prompt_tokens[k] != m.prompt_tokens[k + m.n_repeat()])
      throw data_error("manifest: prompt is not a repeated sequence");
  if (m.heads.empty()) throw data_error("manifest: no heads");
  std::set<HeadId> seen;
  for (const auto& h : m.heads) {
    const std::string name = "head L" + std::to_string(h.layer) + "H" + std::to_string(h.head);
    if (h.layer < 0 || h.layer >= m.n_layers || h.head < 0 || h.head >= m.n_heads)
      throw data_error("manifest: " + name + " is outside n_layers x n_heads");
    if (!seen.insert({h.layer, h.head}).second) throw data_error("manifest: duplicate " + name);
    auto check = [&](const std::string& file, const Shape& shape, std::size_t rows, std::size_t cols,
                     const char* what) {
      if (shape != Shape{rows, cols})
        throw data_error("manifest: " + name + " " + what + " shape must be [" +
                         std::to_string(rows) + ", " + std::to_string(cols) + "]");
      const auto path = dir / file;
      std::error_code ec;
      const auto bytes = std::filesystem::file_size(path, ec);
      if (ec) throw data_error("manifest: " + name + " " + what + " file missing: " + file);
      if (bytes != 4 * detail::shape_elems(shape))
        throw data_error("manifest: " + name + " " + what + " byte length does not match shape");
    };
    check(h.scores_file, h.scores_shape, T, T, "scores");
    if (h.pattern_file) check(*h.pattern_file, h.pattern_shape, T, T, "pattern");
    if (h.kernel_file)
      check(*h.kernel_file, h.kernel_shape, static_cast<std::size_t>(m.d_head),
            static_cast<std::size_t>(m.d_head), "kernel");
  }
}

inline LoadedExport load_export(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw data_error("not a directory: " + dir.string());
  LoadedExport ex{read_manifest(dir), {}};
  validate_export(dir, ex.manifest);
  for (const auto& h : ex.manifest.heads) {
    LoadedHead lh;
    lh.id = {h.layer, h.head};
    lh.scores = {read_blob(dir / h.scores_file, h.scores_shape), AttentionKind::scores, h.layer, h.head};
    if (h.pattern_file)
      lh.pattern = AttentionMatrix{read_blob(dir / *h.pattern_file, h.pattern_shape),
                                   AttentionKind::pattern, h.layer, h.head};
    if (h.kernel_file)
      lh.kernel = CopyKernel{read_blob(dir / *h.kernel_file, h.kernel_shape), h.layer, h.head};
    ex.heads.push_back(std::move(lh));
  }
  return ex;
}

/// Exports scores, patterns (softmax heads) and reduced copy kernels of a toy
/// model on `prompt`. Any existing manifest is removed before blobs are written.
inline ExportManifest export_toy(const ToyModel& model, const TokenSequence& prompt,
                                 const std::string& model_name, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  fs::remove(dir / kManifestName);
  const auto fr = forward(model, prompt);

  ExportManifest m;
  m.model_name = model_name;
  m.n_layers = static_cast<int>(model.layers.size());
  m.n_heads = static_cast<int>(model.config.n_heads);
  m.d_head = static_cast<int>(model.config.d_head);
  m.prompt_tokens = prompt.tokens;
  m.extraction_timestamp = "1970-01-01T00:00:00Z";
  const std::size_t T = prompt.size();
  for (const auto& tr : fr.heads) {
    const std::string stem = "L" + std::to_string(tr.id.layer) + "H" + std::to_string(tr.id.head);
    HeadEntry h;
    h.layer = tr.id.layer;
    h.head = tr.id.head;
    h.scores_file = stem + "_scores.f32";
    h.scores_shape = {T, T};
    write_blob(dir / h.scores_file, tr.scores.values);
    if (tr.pattern) {
      h.pattern_file = stem + "_pattern.f32";
      h.pattern_shape = {T, T};
      write_blob(dir / *h.pattern_file, tr.pattern->values);
    }
    h.kernel_file = stem + "_kernel.f32";
    h.kernel_shape = {model.config.d_head, model.config.d_head};
    write_blob(dir / *h.kernel_file, copy_kernel(model, tr.id).matrix);
    m.heads.push_back(std::move(h));
  }
  const auto tmp = dir / (std::string(kManifestName) + ".tmp");
  {
    std::ofstream os(tmp, std::ios::trunc);
    os << manifest_to_string(m);
    if (!os) throw data_error("cannot write manifest in " + dir.string());
  }
  fs::rename(tmp, dir / kManifestName);
  return m;
}

}  // namespace cmrhead
