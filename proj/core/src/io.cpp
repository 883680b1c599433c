#include "debnn/io.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <sys/stat.h>
#include <unistd.h>

#include <bit>
#include <cerrno>
#include <cstring>
#include <fstream>
#include <sstream>
#include <system_error>

#include <json.hpp>

namespace debnn {

using nlohmann::json;

namespace {

// --- arrays ---------------------------------------------------------------

// Doubles are stored as little-endian IEEE-754 bit patterns in a CBOR byte
// string, which round-trips every value (NaN payloads included).
json pack_doubles(const double* data, std::size_t n) {
  json::binary_t::container_type out(n * 8);
  for (std::size_t i = 0; i < n; ++i) {
    const auto bits = std::bit_cast<std::uint64_t>(data[i]);
    for (int b = 0; b < 8; ++b) out[i * 8 + b] = static_cast<std::uint8_t>(bits >> (8 * b));
  }
  return json::binary(std::move(out));
}

std::vector<double> unpack_doubles(const json& j) {
  const auto& bytes = j.get_binary();
  if (bytes.size() % 8 != 0) throw std::invalid_argument("array byte length not a multiple of 8");
  std::vector<double> out(bytes.size() / 8);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[i * 8 + b]) << (8 * b);
    out[i] = std::bit_cast<double>(bits);
  }
  return out;
}

json pack(const Eigen::MatrixXd& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", pack_doubles(m.data(), static_cast<std::size_t>(m.size()))}};
}

Eigen::MatrixXd unpack_matrix(const json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const std::vector<double> v = unpack_doubles(j.at("data"));
  if (static_cast<Eigen::Index>(v.size()) != rows * cols) throw std::invalid_argument("matrix size mismatch");
  return Eigen::Map<const Eigen::MatrixXd>(v.data(), rows, cols);
}

json pack(const Eigen::VectorXd& v) { return pack_doubles(v.data(), static_cast<std::size_t>(v.size())); }

Eigen::VectorXd unpack_vector(const json& j) {
  const std::vector<double> v = unpack_doubles(j);
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

json pack(const std::vector<double>& v) { return pack_doubles(v.data(), v.size()); }

// --- domain pieces --------------------------------------------------------

json pack(const NetworkSpec& s) {
  return {{"layer_widths", s.layer_widths},
          {"activation", to_string(s.activation)},
          {"head", to_string(s.head)},
          {"num_classes", s.num_classes}};
}

NetworkSpec unpack_spec(const json& j) {
  NetworkSpec s;
  s.layer_widths = j.at("layer_widths").get<std::vector<int>>();
  s.activation = activation_from_string(j.at("activation").get<std::string>());
  s.head = head_from_string(j.at("head").get<std::string>());
  s.num_classes = j.at("num_classes").get<int>();
  s.validate();
  return s;
}

json pack(const ParamVector& p) {
  return {{"values", pack(p.values)}, {"last_layer", {p.last_layer.begin, p.last_layer.end}}};
}

ParamVector unpack_params(const json& j) {
  ParamVector p;
  p.values = unpack_vector(j.at("values"));
  p.last_layer.begin = j.at("last_layer").at(0).get<Eigen::Index>();
  p.last_layer.end = j.at("last_layer").at(1).get<Eigen::Index>();
  if (p.last_layer.begin < 0 || p.last_layer.end > p.size() || p.last_layer.size() <= 0) {
    throw std::invalid_argument("last-layer partition out of range");
  }
  return p;
}

json pack(const TrainConfig& c) {
  json j = {{"epochs", c.epochs},       {"batch_size", c.batch_size},
            {"lr", c.lr},               {"momentum", c.momentum},
            {"weight_decay", c.weight_decay}, {"lr_schedule", to_string(c.lr_schedule)},
            {"seed", c.seed}};
  j["early_stop_patience"] = c.early_stop_patience ? json(*c.early_stop_patience) : json(nullptr);
  return j;
}

TrainConfig unpack_config(const json& j) {
  TrainConfig c;
  c.epochs = j.at("epochs").get<int>();
  c.batch_size = j.at("batch_size").get<int>();
  c.lr = j.at("lr").get<double>();
  c.momentum = j.at("momentum").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.lr_schedule = schedule_from_string(j.at("lr_schedule").get<std::string>());
  c.seed = j.at("seed").get<std::uint64_t>();
  const json& p = j.at("early_stop_patience");
  c.early_stop_patience = p.is_null() ? std::nullopt : std::optional<int>(p.get<int>());
  return c;
}

json pack(const TuningTable& t) {
  std::vector<double> flat;
  for (const auto& row : t.rows) flat.insert(flat.end(), row.begin(), row.end());
  return {{"parameter", t.parameter}, {"columns", t.columns}, {"rows", t.rows.size()},
          {"data", pack(flat)}};
}

TuningTable unpack_table(const json& j) {
  TuningTable t;
  t.parameter = j.at("parameter").get<std::string>();
  t.columns = j.at("columns").get<std::vector<std::string>>();
  const auto n = j.at("rows").get<std::size_t>();
  const std::vector<double> flat = unpack_doubles(j.at("data"));
  if (flat.size() != n * t.columns.size()) throw std::invalid_argument("tuning table size mismatch");
  for (std::size_t r = 0; r < n; ++r) {
    t.rows.emplace_back(flat.begin() + static_cast<std::ptrdiff_t>(r * t.columns.size()),
                        flat.begin() + static_cast<std::ptrdiff_t>((r + 1) * t.columns.size()));
  }
  return t;
}

json pack_llla(const LllaPosterior& p) {
  return {{"theta_map", pack(p.theta_map())},
          {"ggn", pack(p.ggn())},
          {"prior_precision", p.prior_precision()},
          {"mode", p.mode() == HessianMode::full ? "full" : "diagonal"},
          {"scale", p.scale()}};
}

LllaPosterior unpack_llla(const json& j) {
  const std::string mode = j.at("mode").get<std::string>();
  if (mode != "full" && mode != "diagonal") throw std::invalid_argument("unknown Hessian mode");
  return LllaPosterior(unpack_params(j.at("theta_map")), unpack_matrix(j.at("ggn")),
                       j.at("prior_precision").get<double>(),
                       mode == "full" ? HessianMode::full : HessianMode::diagonal,
                       j.at("scale").get<double>());
}

json pack(const Posterior& post) {
  json j;
  j["variant"] = variant_name(post);
  if (const auto* p = std::get_if<PointMassPosterior>(&post)) {
    j["center"] = pack(p->center);
  } else if (const auto* s = std::get_if<SwagPosterior>(&post)) {
    j["theta_swa"] = pack(s->theta_swa);
    j["sigma_diag"] = pack(s->sigma_diag);
    j["deviations"] = pack(s->deviations);
    j["scale"] = s->scale;
  } else if (const auto* l = std::get_if<LllaPosterior>(&post)) {
    j["llla"] = pack_llla(*l);
  } else {
    const auto& f = std::get<FlowPosterior>(post);
    j["base"] = pack_llla(f.base);
    json flows = json::array();
    for (const RadialFlow& r : f.flows) {
      flows.push_back({{"z0", pack(r.z0)}, {"log_alpha", r.log_alpha}, {"beta_raw", r.beta_raw}});
    }
    j["flows"] = std::move(flows);
  }
  return j;
}

Posterior unpack_posterior(const json& j) {
  const std::string v = j.at("variant").get<std::string>();
  if (v == "point_mass") return PointMassPosterior{unpack_params(j.at("center"))};
  if (v == "swag") {
    SwagPosterior s;
    s.theta_swa = unpack_params(j.at("theta_swa"));
    s.sigma_diag = unpack_vector(j.at("sigma_diag"));
    s.deviations = unpack_matrix(j.at("deviations"));
    s.scale = j.at("scale").get<double>();
    return s;
  }
  if (v == "llla") return unpack_llla(j.at("llla"));
  if (v == "llla_flow") {
    FlowPosterior f{unpack_llla(j.at("base")), {}};
    for (const json& r : j.at("flows")) {
      f.flows.push_back(RadialFlow{unpack_vector(r.at("z0")), r.at("log_alpha").get<double>(),
                                   r.at("beta_raw").get<double>()});
    }
    return f;
  }
  throw std::invalid_argument("unknown posterior variant '" + v + "'");
}

json pack_report(const MetricsReport& r) {
  const auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  return {{"experiment", r.experiment}, {"method", r.method},     {"k", r.k},
          {"samples", r.samples},       {"lambda", r.lambda},     {"seed", r.seed},
          {"draw", r.draw},             {"sampling", r.sampling}, {"task", r.task},
          {"elpd", r.elpd},             {"elpd_se", r.elpd_se},   {"accuracy", opt(r.accuracy)},
          {"n_mae", opt(r.n_mae)},      {"ece", opt(r.ece)},      {"auroc", opt(r.auroc)},
          {"ece_bins", r.ece_bins},     {"ood_score", r.ood_score}};
}

MetricsReport unpack_report(const json& j) {
  const auto opt = [&](const char* key) {
    const json& v = j.at(key);
    return v.is_null() ? std::nullopt : std::optional<double>(v.get<double>());
  };
  MetricsReport r;
  r.experiment = j.at("experiment").get<std::string>();
  r.method = j.at("method").get<std::string>();
  r.k = j.at("k").get<int>();
  r.samples = j.at("samples").get<int>();
  r.lambda = j.at("lambda").get<double>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.draw = j.at("draw").get<int>();
  r.sampling = j.at("sampling").get<std::string>();
  r.task = j.at("task").get<std::string>();
  r.elpd = j.at("elpd").get<double>();
  r.elpd_se = j.at("elpd_se").get<double>();
  r.accuracy = opt("accuracy");
  r.n_mae = opt("n_mae");
  r.ece = opt("ece");
  r.auroc = opt("auroc");
  r.ece_bins = j.at("ece_bins").get<int>();
  r.ood_score = j.at("ood_score").get<std::string>();
  return r;
}

json pack_indices(const std::vector<Eigen::Index>& idx) { return idx; }

// --- envelope -------------------------------------------------------------

Bytes wrap(const char* kind, json payload) {
  const json doc = {{"format", "debnn"},
                    {"version", kFileFormatVersion},
                    {"kind", kind},
                    {"payload", std::move(payload)}};
  return json::to_cbor(doc);
}

template <typename F>
auto unwrap(std::span<const std::uint8_t> bytes, const char* kind, F&& build) {
  json doc;
  try {
    doc = json::from_cbor(bytes.begin(), bytes.end());
  } catch (const json::parse_error& e) {
    throw CorruptFileError(std::string("cannot decode ") + kind + " file: " + e.what(), e.byte);
  }
  try {
    if (doc.at("format").get<std::string>() != "debnn") {
      throw CorruptFileError("not a debnn file", 0);
    }
    const int version = doc.at("version").get<int>();
    if (version != kFileFormatVersion) {
      throw VersionError("file format version " + std::to_string(version) +
                         " is not supported (expected " + std::to_string(kFileFormatVersion) + ")");
    }
    const std::string found = doc.at("kind").get<std::string>();
    if (found != kind) {
      throw std::invalid_argument("expected a " + std::string(kind) + " file, found " + found);
    }
    return build(doc.at("payload"));
  } catch (const json::exception& e) {
    throw CorruptFileError(std::string("malformed ") + kind + " file: " + e.what(), bytes.size());
  }
}

}  // namespace

// --- encode / decode ------------------------------------------------------

Bytes encode(const Dataset& d) {
  json gen = {{"name", d.generator.name},
              {"n", d.generator.n},
              {"noise", d.generator.noise},
              {"seed", d.generator.seed},
              {"num_classes", d.generator.num_classes}};
  return wrap("dataset", {{"inputs", pack(d.inputs)},
                          {"targets", pack(d.targets)},
                          {"task", d.task == TaskKind::classification ? "classification" : "regression"},
                          {"num_classes", d.num_classes},
                          {"train", pack_indices(d.splits.train)},
                          {"val", pack_indices(d.splits.val)},
                          {"test", pack_indices(d.splits.test)},
                          {"generator", std::move(gen)}});
}

template <>
Dataset decode<Dataset>(std::span<const std::uint8_t> bytes) {
  return unwrap(bytes, "dataset", [](const json& j) {
    Dataset d;
    d.inputs = unpack_matrix(j.at("inputs"));
    d.targets = unpack_vector(j.at("targets"));
    const std::string task = j.at("task").get<std::string>();
    d.task = task == "classification" ? TaskKind::classification : TaskKind::regression;
    d.num_classes = j.at("num_classes").get<int>();
    d.splits.train = j.at("train").get<std::vector<Eigen::Index>>();
    d.splits.val = j.at("val").get<std::vector<Eigen::Index>>();
    d.splits.test = j.at("test").get<std::vector<Eigen::Index>>();
    const json& g = j.at("generator");
    d.generator = GeneratorSpec{g.at("name").get<std::string>(), g.at("n").get<std::size_t>(),
                                g.at("noise").get<double>(), g.at("seed").get<std::uint64_t>(),
                                g.at("num_classes").get<int>()};
    d.validate();
    return d;
  });
}

Bytes encode(const OodPair& o) {
  return wrap("ood", {{"id_name", o.id_name},
                      {"inputs", pack(o.inputs)},
                      {"kind", to_string(o.kind)},
                      {"seed", o.seed}});
}

template <>
OodPair decode<OodPair>(std::span<const std::uint8_t> bytes) {
  return unwrap(bytes, "ood", [](const json& j) {
    return OodPair{j.at("id_name").get<std::string>(), unpack_matrix(j.at("inputs")),
                   ood_kind_from_string(j.at("kind").get<std::string>()),
                   j.at("seed").get<std::uint64_t>()};
  });
}

Bytes encode(const Checkpoint& c) {
  json trace = json::array();
  for (const EpochRecord& e : c.trace) trace.push_back({e.epoch, e.train_nll, e.val_elpd});
  return wrap("checkpoint", {{"id", c.id},
                             {"spec", pack(c.spec)},
                             {"theta", pack(c.theta)},
                             {"config", pack(c.config)},
                             {"trace", std::move(trace)},
                             {"best_epoch", c.best_epoch}});
}

template <>
Checkpoint decode<Checkpoint>(std::span<const std::uint8_t> bytes) {
  return unwrap(bytes, "checkpoint", [](const json& j) {
    Checkpoint c;
    c.id = j.at("id").get<std::string>();
    c.spec = unpack_spec(j.at("spec"));
    c.theta = unpack_params(j.at("theta"));
    check_params(c.spec, c.theta);
    c.config = unpack_config(j.at("config"));
    for (const json& e : j.at("trace")) {
      c.trace.push_back(EpochRecord{e.at(0).get<int>(), e.at(1).get<double>(), e.at(2).get<double>()});
    }
    c.best_epoch = j.at("best_epoch").get<int>();
    return c;
  });
}

Bytes encode(const PosteriorHandle& h) {
  json tuning = nullptr;
  if (h.tuning) {
    tuning = {{"parameter", h.tuning->parameter},
              {"value", h.tuning->value},
              {"val_elpd", h.tuning->val_elpd},
              {"table", pack(h.tuning->table)}};
  }
  return wrap("posterior", {{"spec", pack(h.spec)},
                            {"posterior", pack(h.posterior)},
                            {"provenance", h.provenance},
                            {"method", h.method},
                            {"tuning", std::move(tuning)}});
}

template <>
PosteriorHandle decode<PosteriorHandle>(std::span<const std::uint8_t> bytes) {
  return unwrap(bytes, "posterior", [](const json& j) {
    PosteriorHandle h{unpack_spec(j.at("spec")), unpack_posterior(j.at("posterior")),
                      j.at("provenance").get<std::string>(), j.at("method").get<std::string>(),
                      std::nullopt};
    const json& t = j.at("tuning");
    if (!t.is_null()) {
      h.tuning = TuningRecord{t.at("parameter").get<std::string>(), t.at("value").get<double>(),
                              t.at("val_elpd").get<double>(), unpack_table(t.at("table"))};
    }
    return h;
  });
}

Bytes encode(const EnsembleManifest& m) {
  return wrap("manifest",
              {{"members", m.members}, {"weights", pack(m.weights)}, {"seed", m.seed}, {"k", m.k}});
}

template <>
EnsembleManifest decode<EnsembleManifest>(std::span<const std::uint8_t> bytes) {
  return unwrap(bytes, "manifest", [](const json& j) {
    return EnsembleManifest{j.at("members").get<std::vector<std::string>>(),
                            unpack_doubles(j.at("weights")), j.at("seed").get<std::uint64_t>(),
                            j.at("k").get<int>()};
  });
}

Bytes encode(const MetricsReport& r) { return wrap("report", pack_report(r)); }

template <>
MetricsReport decode<MetricsReport>(std::span<const std::uint8_t> bytes) {
  return unwrap(bytes, "report", [](const json& j) { return unpack_report(j); });
}

// --- files ----------------------------------------------------------------

Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

// --- result store ---------------------------------------------------------

std::string report_to_json(const MetricsReport& r) { return pack_report(r).dump(); }

MetricsReport report_from_json(const std::string& line) {
  return unpack_report(json::parse(line));
}

namespace {

struct FdGuard {
  int fd;
  ~FdGuard() {
    if (fd >= 0) ::close(fd);
  }
};

struct LockGuard {
  int fd;
  explicit LockGuard(int f, int op) : fd(f) {
    while (::flock(fd, op) != 0) {
      if (errno != EINTR) throw std::system_error(errno, std::generic_category(), "flock");
    }
  }
  ~LockGuard() { ::flock(fd, LOCK_UN); }
};

}  // namespace

ResultStore::ResultStore(std::filesystem::path path) : path_(std::move(path)) {
  if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
}

std::string ResultStore::key(const MetricsReport& r) {
  return r.experiment + '\x1f' + r.method + '\x1f' + std::to_string(r.k) + '\x1f' +
         std::to_string(r.seed);
}

void ResultStore::sync_keys(int fd) {
  struct stat st {};
  if (::fstat(fd, &st) != 0) throw std::system_error(errno, std::generic_category(), "fstat");
  const auto size = static_cast<std::uint64_t>(st.st_size);
  if (size <= scanned_) return;
  std::string chunk(size - scanned_, '\0');
  std::size_t got = 0;
  while (got < chunk.size()) {
    const ssize_t n = ::pread(fd, chunk.data() + got, chunk.size() - got,
                              static_cast<off_t>(scanned_ + got));
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) break;
    got += static_cast<std::size_t>(n);
  }
  std::size_t start = 0;
  for (std::size_t nl; (nl = chunk.find('\n', start)) != std::string::npos && nl < got; start = nl + 1) {
    keys_.insert(key(report_from_json(chunk.substr(start, nl - start))));
  }
  scanned_ += start;
}

void ResultStore::append(const MetricsReport& r) {
  const int fd = ::open(path_.c_str(), O_RDWR | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (fd < 0) throw std::system_error(errno, std::generic_category(), "open " + path_.string());
  FdGuard guard{fd};
  LockGuard lock(fd, LOCK_EX);
  sync_keys(fd);
  const std::string k = key(r);
  if (keys_.count(k) != 0) {
    throw DuplicateKeyError("result store already holds " + r.experiment + "/" + r.method +
                            "/K=" + std::to_string(r.k) + "/seed=" + std::to_string(r.seed));
  }
  const std::string line = report_to_json(r) + "\n";
  std::size_t done = 0;
  while (done < line.size()) {
    const ssize_t n = ::write(fd, line.data() + done, line.size() - done);
    if (n < 0 && errno == EINTR) continue;
    if (n < 0) throw std::system_error(errno, std::generic_category(), "write " + path_.string());
    done += static_cast<std::size_t>(n);
  }
  keys_.insert(k);
  scanned_ += line.size();
}

std::vector<MetricsReport> ResultStore::read() const {
  std::vector<MetricsReport> out;
  const int fd = ::open(path_.c_str(), O_RDONLY | O_CLOEXEC);
  if (fd < 0) {
    if (errno == ENOENT) return out;
    throw std::system_error(errno, std::generic_category(), "open " + path_.string());
  }
  FdGuard guard{fd};
  LockGuard lock(fd, LOCK_SH);
  std::string text;
  char buf[1 << 16];
  for (ssize_t n; (n = ::read(fd, buf, sizeof buf)) != 0;) {
    if (n < 0) {
      if (errno == EINTR) continue;
      throw std::system_error(errno, std::generic_category(), "read " + path_.string());
    }
    text.append(buf, static_cast<std::size_t>(n));
  }
  std::size_t start = 0;
  for (std::size_t nl; (nl = text.find('\n', start)) != std::string::npos; start = nl + 1) {
    out.push_back(report_from_json(text.substr(start, nl - start)));
  }
  return out;
}

std::string reports_to_csv(const std::vector<MetricsReport>& reports) {
  std::ostringstream out;
  const auto write_row = [&out](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out << ',';
      out << cells[i];
    }
    out << '\n';
  };
  write_row(metrics_csv_header());
  for (const auto& r : reports) write_row(metrics_csv_row(r));
  return out.str();
}

}  // namespace debnn
