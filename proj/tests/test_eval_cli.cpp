#include "protostyle/cli.hpp"

#include <gtest/gtest.h>

#include <cstdlib>

using namespace protostyle;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code = 0;
  std::string out;
  std::string err;
};

CliResult run(std::vector<std::string> args) {
  args.insert(args.begin(), "protostyle");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  CliResult r;
  r.code = cli_main(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

std::map<std::string, std::string> tree_hashes(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = sha256_file(e.path());
  return out;
}

class ScopedEnv {
 public:
  ScopedEnv(const char* name, const char* value) : name_(name) {
    if (const char* old = std::getenv(name)) old_ = old;
    ::setenv(name, value, 1);
  }
  ~ScopedEnv() {
    if (old_)
      ::setenv(name_, old_->c_str(), 1);
    else
      ::unsetenv(name_);
  }

 private:
  const char* name_;
  std::optional<std::string> old_;
};

// One small end-to-end run shared by the pipeline tests.
class CliPipeline : public ::testing::Test {
 protected:
  static fs::path root;
  static fs::path cfg_path;

  static void SetUpTestSuite() {
    root = fs::temp_directory_path() / "protostyle_cli_test";
    fs::remove_all(root);
    fs::create_directories(root);
    cfg_path = root / "tiny.cfg";
    std::ofstream os(cfg_path);
    os << "# small end-to-end configuration\n"
          "data = " << (root / "data").string() << "\n"
          "codec = " << (root / "codec" / "codec.pstn").string() << "\n"
          "base = " << (root / "base" / "base.pstn").string() << "\n"
          "model = " << (root / "style" / "style.pstn").string() << "\n"
          "n_per_cell = 4\n"
          "codec_hidden = 64\ncodec_steps = 80\n"
          "denoiser_width = 32\ndenoiser_blocks = 2\ndenoiser_mlp_hidden = 32\ntime_width = 32\nbase_steps = 30\nbatch = 8\n"
          "encoder_width = 16\nencoder_mlp_hidden = 32\nencoder_layers = 1\n"
          "style_iterations = 12\nstyle_batch = 6\nk_local = 6\n"
          "ddim_steps = 6\neval_samples = 3\ntransfer_pairs = 2\n";
    os.close();
    for (const char* cmd : {"gen-data", "train-codec", "pretrain-base", "train-style"}) {
      const CliResult r = run({cmd, "--config", cfg_path.string()});
      ASSERT_EQ(r.code, 0) << cmd << ": " << r.err;
    }
  }

  static std::vector<std::string> with_config(std::vector<std::string> args) {
    args.insert(args.begin() + 1, {"--config", cfg_path.string()});
    return args;
  }
};

fs::path CliPipeline::root;
fs::path CliPipeline::cfg_path;

}  // namespace

TEST(Cli, UsageOnMissingOrUnknownSubcommand) {
  CliResult r = run({});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("usage:"), std::string::npos);
  r = run({"train-everything"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("unknown subcommand"), std::string::npos);
  for (const auto& c : subcommands()) EXPECT_NE(r.err.find(c), std::string::npos) << c;
}

TEST(Cli, HelpDocumentsEveryKey) {
  const CliResult r = run({"--help"});
  EXPECT_EQ(r.code, 0);
  for (const auto& k : config_registry()) EXPECT_NE(r.out.find("--" + dashed(k.name)), std::string::npos) << k.name;
  EXPECT_NE(r.out.find("PROTOSTYLE_THREADS"), std::string::npos);
  const CliResult sub = run({"sample", "--help"});
  EXPECT_EQ(sub.code, 0);
  EXPECT_NE(sub.out.find("--gamma-g"), std::string::npos);
}

TEST(Cli, ConfigErrorsNameTheField) {
  const fs::path dir = fs::temp_directory_path() / "protostyle_cli_cfg";
  fs::remove_all(dir);
  CliResult r = run({"gen-data", "--seed", "abc", "--data", (dir / "d").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("seed"), std::string::npos);
  r = run({"gen-data", "--n-per-cell", "0", "--data", (dir / "d").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("n_per_cell"), std::string::npos);
  r = run({"gen-data", "--no-such-key", "1"});
  EXPECT_EQ(r.code, 1);

  fs::create_directories(dir);
  write_text(dir / "bad.cfg", "seed = 3\nwarp_factor = 9\n");
  r = run({"gen-data", "--config", (dir / "bad.cfg").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("warp_factor"), std::string::npos);
  write_text(dir / "bad2.cfg", "seed 3\n");
  r = run({"gen-data", "--config", (dir / "bad2.cfg").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("line 1"), std::string::npos);
  fs::remove_all(dir);
}

TEST(Cli, ThreadVariableIsValidated) {
  ScopedEnv env("PROTOSTYLE_THREADS", "many");
  const CliResult r = run({"gen-data", "--data", (fs::temp_directory_path() / "protostyle_unused").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("PROTOSTYLE_THREADS"), std::string::npos);
  EXPECT_FALSE(fs::exists(fs::temp_directory_path() / "protostyle_unused"));
}

TEST(Cli, MissingInputsAreIoErrors) {
  const fs::path dir = fs::temp_directory_path() / "protostyle_cli_missing";
  const CliResult r = run({"train-codec", "--data", (dir / "nothing").string(), "--codec", (dir / "c.pstn").string()});
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("io error"), std::string::npos);
}

TEST(Config, TypedAccessAndFiles) {
  Config c;
  EXPECT_EQ(c.integer("seed"), 7);
  c.set("gamma-g", "2.5");
  EXPECT_EQ(c.real("gamma_g"), 2.5);
  c.set("seed", "1.5");
  EXPECT_THROW(c.integer("seed"), ConfigError);
  c.set("temporal_mixing", "maybe");
  EXPECT_THROW(c.boolean("temporal_mixing"), ConfigError);
  EXPECT_THROW(c.set("nonsense", "1"), ConfigError);
  const fs::path p = fs::temp_directory_path() / "protostyle_config_test.cfg";
  write_text(p, "# comment\n\n  w_c = 3   # trailing\nlocal-guidance=true\n");
  c.load_file(p);
  EXPECT_EQ(c.real("w_c"), 3.0);
  EXPECT_TRUE(c.boolean("local_guidance"));
  fs::remove(p);
  EXPECT_THROW(c.load_file(p), IoError);
  for (const auto& k : config_registry()) EXPECT_FALSE(k.help.empty()) << k.name;
}

TEST(Parallel, MapKeepsOrderAndPropagatesErrors) {
  const auto sq = parallel_map<int>(50, [](size_t i) { return static_cast<int>(i * i); }, 4);
  for (size_t i = 0; i < sq.size(); ++i) EXPECT_EQ(sq[i], static_cast<int>(i * i));
  EXPECT_THROW(parallel_map<int>(10, [](size_t i) -> int { if (i == 7) throw StateError("boom"); return 0; }, 3), StateError);
  {
    ScopedEnv env("PROTOSTYLE_THREADS", "3");
    EXPECT_EQ(worker_count(), 3);
  }
  {
    ScopedEnv env("PROTOSTYLE_THREADS", "0");
    EXPECT_THROW(worker_count(), ConfigError);
  }
}

TEST(Cli, GenDataIsDeterministic) {
  const fs::path dir = fs::temp_directory_path() / "protostyle_cli_gen";
  fs::remove_all(dir);
  ASSERT_EQ(run({"gen-data", "--seed", "7", "--n-per-cell", "2", "--data", (dir / "a").string()}).code, 0);
  ASSERT_EQ(run({"gen-data", "--seed", "7", "--n-per-cell", "2", "--data", (dir / "b").string()}).code, 0);
  const auto a = tree_hashes(dir / "a");
  const auto b = tree_hashes(dir / "b");
  // The manifests embed their own directory; every sequence file matches byte for byte.
  ASSERT_EQ(a.size(), b.size());
  for (const auto& [name, h] : a)
    if (name != "manifest.json") {
      EXPECT_EQ(h, b.at(name)) << name;
    }
  json ma = read_json(dir / "a" / "manifest.json"), mb = read_json(dir / "b" / "manifest.json");
  ma.erase("run");
  mb.erase("run");
  EXPECT_EQ(ma, mb);
  fs::remove_all(dir);
}

TEST_F(CliPipeline, TrainingStagesRecordManifests) {
  for (const char* dir : {"codec", "base", "style"}) {
    const json m = read_json(root / dir / "manifest.json");
    EXPECT_EQ(m.at("format"), "protostyle-run/1");
    EXPECT_EQ(m.at("seed"), "7");
    EXPECT_TRUE(m.at("inputs").contains("data"));
    EXPECT_FALSE(m.at("outputs").empty());
  }
  const json side = load_sidecar(root / "base" / "base.pstn");
  EXPECT_EQ(side.at("schedule_hash"), cosine_schedule(1000).fingerprint());
  EXPECT_EQ(side.at("iterations"), 30);
  EXPECT_TRUE(side.at("config").is_object());
  EXPECT_FALSE(side.at("config").contains("data"));  // sidecars carry no paths
}

TEST_F(CliPipeline, SampleTransferInspectAndReruns) {
  const fs::path samples = root / "samples";
  CliResult r = run(with_config({"sample", "--out", samples.string(), "--count", "2", "--prototype", "1", "--seed", "3"}));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(samples / "sample_000.f32"));
  EXPECT_TRUE(fs::exists(samples / "sample_001.f32"));

  const Corpus corpus = load_corpus(root / "data");
  const fs::path content = root / "data" / sequence_filename(corpus.items.front());
  const fs::path style = root / "data" / sequence_filename(corpus.items.back());
  r = run(with_config({"transfer", "--out", (root / "transfer").string(), "--content-seq", content.string(), "--style-seq",
                       style.string()}));
  ASSERT_EQ(r.code, 0) << r.err;
  r = run(with_config({"transfer", "--out", (root / "transfer_bad").string()}));
  EXPECT_EQ(r.code, 1);

  r = run(with_config({"inspect-prototypes", "--out", (root / "inspect").string()}));
  ASSERT_EQ(r.code, 0) << r.err;
  const json protos = read_json(root / "inspect" / "prototypes.json");
  EXPECT_FALSE(protos.empty());

  // Every manifest reruns to bit-identical outputs, also into a new directory.
  for (const fs::path& m : {root / "data" / "manifest.json", root / "codec" / "manifest.json", root / "base" / "manifest.json",
                           root / "style" / "manifest.json", samples / "manifest.json", root / "transfer" / "manifest.json",
                           root / "inspect" / "manifest.json"}) {
    const CliResult again = run({manifest_run(read_json(m)).at("command"), "--from-manifest", m.string()});
    EXPECT_EQ(again.code, 0) << m << ": " << again.err;
    EXPECT_NE(again.out.find("bit-identically"), std::string::npos) << m;
  }
  const CliResult moved = run({"sample", "--from-manifest", (samples / "manifest.json").string(), "--out", (root / "moved").string()});
  EXPECT_EQ(moved.code, 0) << moved.err;
  EXPECT_EQ(file_bytes(root / "moved" / "sample_001.f32"), file_bytes(samples / "sample_001.f32"));

  const CliResult wrong = run({"eval", "--from-manifest", (samples / "manifest.json").string()});
  EXPECT_EQ(wrong.code, 1);
}

TEST_F(CliPipeline, ManifestDiffersOnlyInChangedField) {
  const fs::path a = root / "g0", b = root / "g2";
  ASSERT_EQ(run(with_config({"sample", "--seed", "3", "--prototype", "0", "--gamma-g", "0", "--out", a.string()})).code, 0);
  ASSERT_EQ(run(with_config({"sample", "--seed", "3", "--prototype", "0", "--gamma-g", "2", "--out", b.string()})).code, 0);
  const json ma = read_json(a / "manifest.json"), mb = read_json(b / "manifest.json");
  std::vector<std::string> changed;
  for (const auto& [k, v] : ma.at("config").items())
    if (mb.at("config").at(k) != v) changed.push_back(k);
  EXPECT_EQ(changed, (std::vector<std::string>{"gamma_g", "out"}));
  EXPECT_EQ(ma.at("inputs"), mb.at("inputs"));
  EXPECT_NE(ma.at("outputs"), mb.at("outputs"));
  for (const auto& [k, v] : ma.items())
    if (k != "config" && k != "outputs" && k != "summary") {
      EXPECT_EQ(v, mb.at(k)) << k;
    }
}

TEST_F(CliPipeline, ThreadCountDoesNotChangeOutputs) {
  std::map<std::string, std::string> first;
  for (const char* n : {"1", "3"}) {
    ScopedEnv env("PROTOSTYLE_THREADS", n);
    const fs::path out = root / (std::string("threads_") + n);
    ASSERT_EQ(run(with_config({"sample", "--count", "3", "--prototype", "2", "--out", out.string()})).code, 0);
    auto h = tree_hashes(out);
    h.erase("manifest.json");
    if (first.empty())
      first = h;
    else
      EXPECT_EQ(h, first);
  }
}

TEST_F(CliPipeline, EvalIsReadOnlyAndComplete) {
  const auto before = tree_hashes(root / "data");
  const std::string codec_hash = checkpoint_digest(root / "codec" / "codec.pstn");
  const std::string model_hash = checkpoint_digest(root / "style" / "style.pstn");
  const CliResult r = run(with_config({"eval", "--out", (root / "eval").string()}));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(tree_hashes(root / "data"), before);
  EXPECT_EQ(checkpoint_digest(root / "codec" / "codec.pstn"), codec_hash);
  EXPECT_EQ(checkpoint_digest(root / "style" / "style.pstn"), model_hash);
  const json metrics = read_json(root / "eval" / "metrics.json");
  for (const char* k : {"sra", "sra_prototype", "sra_transfer", "content_score", "diversity", "nmi_global", "nmi_local",
                        "oracle_accuracy", "usage"})
    EXPECT_TRUE(metrics.contains(k)) << k;
  EXPECT_GE(metrics.at("oracle_accuracy").get<double>(), 0.95);
  EXPECT_TRUE(fs::exists(root / "eval" / "metrics.csv"));

  const CliResult again = run({"eval", "--from-manifest", (root / "eval" / "manifest.json").string()});
  EXPECT_EQ(again.code, 0) << again.err;
}

TEST_F(CliPipeline, TamperedInputBlocksRerun) {
  const fs::path copy = root / "tamper";
  fs::create_directories(copy);
  fs::copy_file(root / "codec" / "codec.pstn", copy / "codec.pstn");
  fs::copy_file(root / "codec" / "codec.pstn.json", copy / "codec.pstn.json");
  ASSERT_EQ(run(with_config({"sample", "--codec", (copy / "codec.pstn").string(), "--out", (copy / "s").string()})).code, 0);
  {
    std::fstream f(copy / "codec.pstn", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-1, std::ios::end);
    f.put('\x7f');
  }
  const CliResult r = run({"sample", "--from-manifest", (copy / "s" / "manifest.json").string()});
  EXPECT_EQ(r.code, 4);
  EXPECT_NE(r.err.find("differs from the manifest"), std::string::npos);
}
