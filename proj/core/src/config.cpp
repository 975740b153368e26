#include "pudnet/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "pudnet/errors.hpp"
#include "pudnet/rng.hpp"

namespace pudnet::config {

using nlohmann::json;

namespace {

// Walks one JSON object, type-checking each known key and remembering which
// keys were consumed so that leftovers can be reported as unknown.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(path_.empty() ? "<root>" : path_, "expected an object");
  }

  bool has(const char* key) const { return j_.contains(key); }

  void get(const char* key, std::size_t& out) { with(key, [&](const json& v, const std::string& p) {
    if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<long long>() < 0)) fail(p, "expected a non-negative integer");
    out = v.get<std::size_t>();
  }); }

  void get_u64(const char* key, std::uint64_t& out) { with(key, [&](const json& v, const std::string& p) {
    if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<long long>() < 0)) fail(p, "expected a non-negative integer");
    out = v.get<std::uint64_t>();
  }); }

  void get(const char* key, double& out) { with(key, [&](const json& v, const std::string& p) {
    if (!v.is_number()) fail(p, "expected a number");
    out = v.get<double>();
  }); }

  void get(const char* key, bool& out) { with(key, [&](const json& v, const std::string& p) {
    if (!v.is_boolean()) fail(p, "expected true or false");
    out = v.get<bool>();
  }); }

  void get(const char* key, std::string& out) { with(key, [&](const json& v, const std::string& p) {
    if (!v.is_string()) fail(p, "expected a string");
    out = v.get<std::string>();
  }); }

  void get(const char* key, std::vector<std::size_t>& out) { with(key, [&](const json& v, const std::string& p) {
    if (!v.is_array()) fail(p, "expected an array of non-negative integers");
    out.clear();
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!v[i].is_number_unsigned()) fail(p + "[" + std::to_string(i) + "]", "expected a non-negative integer");
      out.push_back(v[i].get<std::size_t>());
    }
  }); }

  Reader child(const char* key) {
    used_.insert(key);
    return Reader(j_.at(key), join(key));
  }

  const json& raw(const char* key) {
    used_.insert(key);
    return j_.at(key);
  }

  std::string join(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!used_.count(it.key())) fail(join(it.key()), "unknown key");
    }
  }

  [[noreturn]] static void fail(const std::string& path, const std::string& what) {
    throw ConfigError(path + ": " + what);
  }

 private:
  template <class F>
  void with(const char* key, F&& f) {
    used_.insert(key);
    if (!j_.contains(key)) return;
    f(j_.at(key), join(key));
  }

  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

json layer_to_json(const target::LayerSpec& l) {
  return {{"c_in", l.c_in}, {"c_out", l.c_out}, {"k", l.kernel}, {"stride", l.stride},
          {"pad", l.pad},   {"norm", l.norm},   {"leaky", l.leaky}, {"pool", l.pool}};
}

}  // namespace

void ExperimentConfig::validate() const {
  if (corpus.n_classes < 2) throw ConfigError("corpus.n_classes: must be >= 2");
  if (corpus.per_class == 0) throw ConfigError("corpus.per_class: must be >= 1");
  if (corpus.height == 0 || corpus.width == 0 || corpus.channels == 0) throw ConfigError("corpus: image dimensions must be >= 1");
  if (!(corpus.noise_sigma >= 0.0)) throw ConfigError("corpus.noise_sigma: must be >= 0");
  if (!(corpus.clutter >= 0.0)) throw ConfigError("corpus.clutter: must be >= 0");
  auto check_classes = [&](const std::vector<std::size_t>& cls, const char* name) {
    std::set<std::size_t> seen;
    for (auto c : cls) {
      if (c >= corpus.n_classes) throw ConfigError(std::string(name) + ": class " + std::to_string(c) + " outside the corpus");
      if (!seen.insert(c).second) throw ConfigError(std::string(name) + ": duplicate class " + std::to_string(c));
    }
    if (cls.size() < tasks.n_way) throw ConfigError(std::string(name) + ": fewer classes than tasks.n_way");
  };
  check_classes(train_classes, "split.train");
  check_classes(test_classes, "split.test");
  for (auto c : train_classes)
    for (auto d : test_classes)
      if (c == d) throw ConfigError("split: class " + std::to_string(c) + " is both train and test");
  if (tasks.n_way == 0 || tasks.n_support == 0 || tasks.n_query == 0) throw ConfigError("tasks: n_way, support and query must be >= 1");
  if (tasks.n_support + tasks.n_query > corpus.per_class) throw ConfigError("tasks: support + query exceeds corpus.per_class");
  if (train.shots > tasks.n_support) throw ConfigError("train.shots: exceeds tasks.support");
  if (eval.threads == 0) throw ConfigError("eval.threads: must be >= 1");
  for (auto e : eval.baseline_epochs)
    if (e == 0) throw ConfigError("eval.baseline_epochs: entries must be >= 1");
  hyper.validate();
  train.validate();
  cca.validate();
  target_spec();
}

std::uint64_t ExperimentConfig::derive_seed(std::string_view label) const {
  return Rng(seed).split(label).next_u64();
}

target::TargetSpec ExperimentConfig::target_spec() const {
  if (target.layers.empty()) return target::convnet3_spec(corpus.channels, target.width, target.width);
  target::TargetSpec spec;
  spec.layers = target.layers;
  spec.embedding_dim = target.layers.back().c_out;
  spec.slope = hyper.slope;
  spec.validate();
  if (spec.layers.front().c_in != corpus.channels) throw ConfigError("target.layers[0].c_in: must equal corpus.channels");
  return spec;
}

ExperimentConfig ExperimentConfig::resolved() const {
  ExperimentConfig r = *this;
  r.corpus.seed = derive_seed("corpus");
  r.tasks.seed = derive_seed("tasks");
  r.train.seed = derive_seed("train");
  r.cca.seed = derive_seed("cca");
  r.hyper.extractor.in_channels = corpus.channels;
  return r;
}

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("<root>: invalid JSON: ") + e.what());
  }
  ExperimentConfig c;
  Reader root(j, "");
  root.get_u64("seed", c.seed);
  std::string rng_name(Rng::kAlgorithm);
  root.get("rng", rng_name);
  if (rng_name != Rng::kAlgorithm) {
    Reader::fail("rng", "unsupported generator '" + rng_name + "', only " + std::string(Rng::kAlgorithm));
  }
  if (root.has("corpus")) {
    Reader r = root.child("corpus");
    r.get("n_classes", c.corpus.n_classes);
    r.get("per_class", c.corpus.per_class);
    r.get("channels", c.corpus.channels);
    r.get("height", c.corpus.height);
    r.get("width", c.corpus.width);
    r.get("noise_sigma", c.corpus.noise_sigma);
    r.get("clutter", c.corpus.clutter);
    std::string fam = data::family_name(c.corpus.family);
    r.get("family", fam);
    try {
      c.corpus.family = data::parse_family(fam);
    } catch (const ConfigError& e) {
      Reader::fail("corpus.family", e.what());
    }
    r.finish();
  }
  if (root.has("split")) {
    Reader r = root.child("split");
    r.get("train", c.train_classes);
    r.get("test", c.test_classes);
    r.finish();
  }
  if (root.has("tasks")) {
    Reader r = root.child("tasks");
    r.get("n_way", c.tasks.n_way);
    r.get("support", c.tasks.n_support);
    r.get("query", c.tasks.n_query);
    r.get("count", c.tasks.count);
    r.finish();
  }
  if (root.has("target")) {
    Reader r = root.child("target");
    r.get("width", c.target.width);
    if (r.has("layers")) {
      const json& arr = r.raw("layers");
      const std::string base = r.join("layers");
      if (!arr.is_array()) Reader::fail(base, "expected an array of layer objects");
      for (std::size_t i = 0; i < arr.size(); ++i) {
        Reader lr(arr[i], base + "[" + std::to_string(i) + "]");
        target::LayerSpec l;
        lr.get("c_in", l.c_in);
        lr.get("c_out", l.c_out);
        lr.get("k", l.kernel);
        lr.get("stride", l.stride);
        lr.get("pad", l.pad);
        lr.get("norm", l.norm);
        lr.get("leaky", l.leaky);
        lr.get("pool", l.pool);
        lr.finish();
        c.target.layers.push_back(l);
      }
    }
    r.finish();
  }
  if (root.has("hypernet")) {
    Reader r = root.child("hypernet");
    r.get("m", c.hyper.extractor.sketch_dim);
    r.get("extractor_hidden", c.hyper.extractor.hidden);
    r.get("p", c.hyper.p);
    r.get("p_mid", c.hyper.p_mid);
    r.get("eta", c.hyper.eta);
    r.get("tau", c.hyper.tau);
    r.get("learn_tau", c.hyper.learn_tau);
    r.get("slope", c.hyper.slope);
    r.get("bn_momentum", c.hyper.extractor.bn_momentum);
    r.finish();
    c.hyper.extractor.slope = c.hyper.slope;
  }
  if (root.has("train")) {
    Reader r = root.child("train");
    r.get("lr", c.train.lr);
    r.get("batch_size", c.train.batch_size);
    r.get("epochs", c.train.epochs);
    r.get("max_steps", c.train.max_steps);
    r.get("shots", c.train.shots);
    r.get("clip_norm", c.train.clip_norm);
    r.get("checkpoint_every", c.train.checkpoint_every);
    r.get("no_context", c.train.no_context);
    r.get("metric_only", c.train.metric_only);
    r.get("no_kl", c.train.no_kl);
    r.finish();
    c.hyper.no_context = c.train.no_context;
  }
  if (root.has("eval")) {
    Reader r = root.child("eval");
    r.get("tasks", c.eval.tasks);
    r.get("baseline_epochs", c.eval.baseline_epochs);
    r.get("baseline_lr", c.eval.baseline_lr);
    r.get("baseline_batch", c.eval.baseline_batch);
    r.get("threads", c.eval.threads);
    r.finish();
  }
  if (root.has("cca")) {
    Reader r = root.child("cca");
    r.get("reps", c.cca.reps);
    r.get("subset_size", c.cca.subset_size);
    r.get("classes_per_subset", c.cca.classes_per_subset);
    r.get("train_epochs", c.cca.train_epochs);
    r.get("batch_size", c.cca.batch_size);
    r.get("lr", c.cca.lr);
    r.get("pool_grid", c.cca.pool_grid);
    r.get("dy", c.cca.dy);
    r.finish();
  }
  root.finish();
  c.validate();
  return c;
}

std::string ExperimentConfig::to_json_text() const {
  json layers = json::array();
  for (const auto& l : target.layers) layers.push_back(layer_to_json(l));
  json j = {
      {"seed", seed},
      {"rng", std::string(Rng::kAlgorithm)},
      {"corpus",
       {{"n_classes", corpus.n_classes},
        {"per_class", corpus.per_class},
        {"channels", corpus.channels},
        {"height", corpus.height},
        {"width", corpus.width},
        {"noise_sigma", corpus.noise_sigma},
        {"clutter", corpus.clutter},
        {"family", data::family_name(corpus.family)}}},
      {"split", {{"train", train_classes}, {"test", test_classes}}},
      {"tasks", {{"n_way", tasks.n_way}, {"support", tasks.n_support}, {"query", tasks.n_query}, {"count", tasks.count}}},
      {"target", {{"width", target.width}, {"layers", layers}}},
      {"hypernet",
       {{"m", hyper.extractor.sketch_dim},
        {"extractor_hidden", hyper.extractor.hidden},
        {"p", hyper.p},
        {"p_mid", hyper.p_mid},
        {"eta", hyper.eta},
        {"tau", hyper.tau},
        {"learn_tau", hyper.learn_tau},
        {"slope", hyper.slope},
        {"bn_momentum", hyper.extractor.bn_momentum}}},
      {"train",
       {{"lr", train.lr},
        {"batch_size", train.batch_size},
        {"epochs", train.epochs},
        {"max_steps", train.max_steps},
        {"shots", train.shots},
        {"clip_norm", train.clip_norm},
        {"checkpoint_every", train.checkpoint_every},
        {"no_context", train.no_context},
        {"metric_only", train.metric_only},
        {"no_kl", train.no_kl}}},
      {"eval",
       {{"tasks", eval.tasks},
        {"baseline_epochs", eval.baseline_epochs},
        {"baseline_lr", eval.baseline_lr},
        {"baseline_batch", eval.baseline_batch},
        {"threads", eval.threads}}},
      {"cca",
       {{"reps", cca.reps},
        {"subset_size", cca.subset_size},
        {"classes_per_subset", cca.classes_per_subset},
        {"train_epochs", cca.train_epochs},
        {"batch_size", cca.batch_size},
        {"lr", cca.lr},
        {"pool_grid", cca.pool_grid},
        {"dy", cca.dy}}},
  };
  return j.dump(2) + "\n";
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw NotFoundError("cannot open config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return ExperimentConfig::from_json_text(ss.str());
}

void save_config(const ExperimentConfig& cfg, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path.string());
  os << cfg.to_json_text();
}

void save_tasks(const TaskFile& tasks, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json groups = json::array();
  for (const auto& g : tasks.groups) {
    groups.push_back({{"id", g.id},
                      {"class_map", g.class_map},
                      {"support", g.support},
                      {"support_labels", g.support_labels},
                      {"query", g.query},
                      {"query_labels", g.query_labels}});
  }
  json j = {{"corpus", std::filesystem::absolute(tasks.corpus).string()},
            {"classes", tasks.classes},
            {"n_way", tasks.sampling.n_way},
            {"support", tasks.sampling.n_support},
            {"query", tasks.sampling.n_query},
            {"count", tasks.sampling.count},
            {"seed", tasks.sampling.seed},
            {"groups", groups}};
  std::ofstream os(dir / "tasks.json");
  if (!os) throw Error("cannot write " + (dir / "tasks.json").string());
  os << j.dump() << "\n";
}

TaskFile load_tasks(const std::filesystem::path& dir) {
  const auto path = dir / "tasks.json";
  std::ifstream is(path);
  if (!is) throw NotFoundError("cannot open task file " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": invalid JSON: " + e.what());
  }
  TaskFile t;
  try {
    t.corpus = j.at("corpus").get<std::string>();
    t.classes = j.at("classes").get<std::vector<std::size_t>>();
    t.sampling.n_way = j.at("n_way").get<std::size_t>();
    t.sampling.n_support = j.at("support").get<std::size_t>();
    t.sampling.n_query = j.at("query").get<std::size_t>();
    t.sampling.count = j.at("count").get<std::size_t>();
    t.sampling.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& g : j.at("groups")) {
      data::TaskGroup group;
      group.id = g.at("id").get<std::uint32_t>();
      group.class_map = g.at("class_map").get<std::vector<std::size_t>>();
      group.support = g.at("support").get<std::vector<std::size_t>>();
      group.support_labels = g.at("support_labels").get<std::vector<std::size_t>>();
      group.query = g.at("query").get<std::vector<std::size_t>>();
      group.query_labels = g.at("query_labels").get<std::vector<std::size_t>>();
      if (group.support.size() != group.support_labels.size() || group.query.size() != group.query_labels.size()) {
        throw FormatError("task " + std::to_string(group.id) + ": label count mismatch");
      }
      t.groups.push_back(std::move(group));
    }
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return t;
}

std::vector<std::size_t> parse_index_list(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      const auto dash = item.find('-');
      if (dash != std::string::npos && dash > 0) {
        const std::size_t lo = std::stoul(item.substr(0, dash));
        const std::size_t hi = std::stoul(item.substr(dash + 1));
        if (hi < lo) throw ConfigError("bad range '" + item + "'");
        for (std::size_t v = lo; v <= hi; ++v) out.push_back(v);
      } else {
        std::size_t pos = 0;
        const long long v = std::stoll(item, &pos);
        if (pos != item.size() || v < 0) throw ConfigError("bad index '" + item + "'");
        out.push_back(static_cast<std::size_t>(v));
      }
    } catch (const std::logic_error&) {
      throw ConfigError("bad index list '" + text + "'");
    }
  }
  return out;
}

std::vector<double> parse_double_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t pos = 0;
      out.push_back(std::stod(item, &pos));
      if (pos != item.size()) throw ConfigError("bad number '" + item + "'");
    } catch (const std::logic_error&) {
      throw ConfigError("bad number list '" + text + "'");
    }
  }
  return out;
}

}  // namespace pudnet::config
