#pragma once

// Flat key=value configuration with a fixed key registry. Keys use
// underscores; the CLI accepts the same keys with dashes as --flags.

#include "protostyle/core.hpp"
#include "protostyle/params.hpp"

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace protostyle {

struct ConfigKey {
  std::string name;
  std::string default_value;
  std::string help;
};

inline const std::vector<ConfigKey>& config_registry() {
  static const std::vector<ConfigKey> keys = {
      // paths
      {"data", "data", "corpus directory"},
      {"out", "", "output directory (defaults per subcommand)"},
      {"codec", "codec/codec.pstn", "codec checkpoint"},
      {"base", "base/base.pstn", "base denoiser checkpoint"},
      {"model", "style/style.pstn", "stylized model checkpoint (encoder, denoiser, bank)"},
      // corpus
      {"seed", "7", "seed of the running subcommand"},
      {"contents", "3", "content classes C"},
      {"styles", "4", "style classes S"},
      {"substyles", "3", "hidden sub-styles per style M"},
      {"n_per_cell", "10", "sequences per (content, style, sub-style) cell"},
      {"length", "64", "sequence length L"},
      {"channels", "8", "channels D"},
      {"window", "8", "segment window w"},
      {"noise_level", "0.01", "texture noise standard deviation"},
      {"split_ratio", "0.8", "train fraction of the stratified split"},
      {"split_seed", "1", "seed of the stratified split"},
      // codec
      {"latent_tokens", "5", "latent vectors n_z"},
      {"token_width", "32", "latent vector width d_z"},
      {"codec_hidden", "256", "codec hidden width"},
      {"kl_weight", "1e-4", "KL weight of the codec objective"},
      {"codec_lr", "1e-3", "codec learning rate"},
      {"codec_steps", "1000", "codec iterations"},
      {"codec_batch", "32", "codec batch size"},
      // diffusion
      {"diffusion_steps", "1000", "diffusion steps T"},
      {"schedule", "cosine", "noise schedule (cosine|linear)"},
      {"denoiser_width", "64", "denoiser width d"},
      {"denoiser_blocks", "4", "denoiser blocks N"},
      {"denoiser_mlp_hidden", "128", "denoiser MLP width"},
      {"content_tokens", "2", "embedding tokens per content class"},
      {"time_width", "64", "timestep feature width"},
      {"base_steps", "3000", "base pretraining iterations"},
      {"base_lr", "1e-3", "base pretraining learning rate"},
      {"batch", "32", "base pretraining batch size"},
      {"cond_drop_prob", "0.1", "condition dropout probability"},
      // style encoder and stylization
      {"encoder_width", "64", "style feature width d'"},
      {"encoder_layers", "2", "style encoder layers"},
      {"encoder_mlp_hidden", "128", "style encoder MLP width"},
      {"temporal_mixing", "true", "self-attention in the style encoder (false: pooling only)"},
      {"style_iterations", "1500", "stylization iterations"},
      {"style_batch", "16", "stylization batch size"},
      {"style_lr", "1e-3", "stylization learning rate"},
      {"lambda_style", "1", "weight of the style loss"},
      {"freeze_fraction", "0.3", "fraction of iterations with prototype EMA updates"},
      {"memory", "256", "feature memory per style for assignments"},
      {"k_global", "3", "global prototypes per style K_g"},
      {"k_local", "30", "local prototypes per style K_l"},
      {"momentum", "0.95", "prototype EMA momentum lambda_p"},
      {"sinkhorn_mu", "0.05", "Sinkhorn entropic regularization"},
      {"sinkhorn_iters", "100", "Sinkhorn iteration cap"},
      {"sinkhorn_tol", "1e-6", "Sinkhorn marginal tolerance"},
      {"tau", "0.05", "intra-style temperature"},
      {"beta_same", "5", "same-style negative weight"},
      {"metric", "cosine", "prototype distance (cosine|l1|l2)"},
      {"variant", "contrastive", "style loss (contrastive|entropy)"},
      {"use_inter", "true", "inter-style loss term"},
      {"use_intra", "true", "intra-style loss term"},
      // guidance and sampling
      {"w_c", "7.5", "content guidance weight"},
      {"w_s", "1", "style guidance weight"},
      {"gamma", "3", "classifier guidance strength"},
      {"guidance_t_max", "300", "classifier guidance applies for t below this"},
      {"gamma_g", "100", "prototype guidance strength"},
      {"prototype_t_max", "1000", "prototype guidance applies for t below this"},
      {"ddim_steps", "50", "DDIM steps"},
      {"clip_z0", "5", "bound on the clean-latent estimate during DDIM (0 disables)"},
      {"transfer_T_prime", "500", "transfer noising step T'"},
      {"transfer_w_s", "2.25", "transfer style guidance weight"},
      {"transfer_gamma", "2.5", "transfer classifier guidance strength"},
      {"content", "0", "content class of samples (-1 for null)"},
      {"style_id", "0", "target style of samples"},
      {"prototype", "-1", "global prototype index to target (-1: reference-guided)"},
      {"local_guidance", "false", "guide per segment with local prototypes instead of the global one"},
      {"reference", "", "reference style sequence (.f32); empty picks one from the corpus"},
      {"count", "1", "number of samples"},
      {"content_seq", "", "content sequence (.f32) for transfer"},
      {"style_seq", "", "style sequence (.f32) for transfer"},
      // evaluation
      {"eval_samples", "40", "generated samples scored per evaluation"},
      {"transfer_pairs", "40", "transfer pairs scored per evaluation"},
  };
  return keys;
}

inline std::string normalize_key(std::string k) {
  for (char& c : k)
    if (c == '-') c = '_';
  return k;
}

class Config {
 public:
  Config() {
    for (const auto& k : config_registry()) values_[k.name] = k.default_value;
  }

  static bool known(const std::string& key) {
    const std::string n = normalize_key(key);
    for (const auto& k : config_registry())
      if (k.name == n) return true;
    return false;
  }

  void set(const std::string& key, const std::string& value) {
    const std::string n = normalize_key(key);
    if (!known(n)) throw ConfigError(n, "unknown configuration key");
    values_[n] = value;
  }

  // Lines of key=value; '#' starts a comment; blank lines are skipped.
  void load_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read config file " + path.string());
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const std::string trimmed = trim(line);
      if (trimmed.empty()) continue;
      const auto eq = trimmed.find('=');
      if (eq == std::string::npos)
        throw ConfigError("line " + std::to_string(lineno), "expected key=value in " + path.string());
      set(trim(trimmed.substr(0, eq)), trim(trimmed.substr(eq + 1)));
    }
  }

  void load_json(const json& j) {
    for (const auto& [k, v] : j.items()) set(k, v.is_string() ? v.get<std::string>() : v.dump());
  }

  const std::string& str(const std::string& key) const {
    auto it = values_.find(normalize_key(key));
    if (it == values_.end()) throw ConfigError(key, "unknown configuration key");
    return it->second;
  }

  int integer(const std::string& key) const {
    const std::string& v = str(key);
    long long out = 0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc() || res.ptr != v.data() + v.size() || out < INT32_MIN || out > INT32_MAX)
      throw ConfigError(key, "expected an integer, got '" + v + "'");
    return static_cast<int>(out);
  }

  std::uint64_t u64(const std::string& key) const {
    const std::string& v = str(key);
    std::uint64_t out = 0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc() || res.ptr != v.data() + v.size())
      throw ConfigError(key, "expected a non-negative integer, got '" + v + "'");
    return out;
  }

  double real(const std::string& key) const {
    const std::string& v = str(key);
    double out = 0.0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc() || res.ptr != v.data() + v.size() || !std::isfinite(out))
      throw ConfigError(key, "expected a finite number, got '" + v + "'");
    return out;
  }

  bool boolean(const std::string& key) const {
    const std::string& v = str(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError(key, "expected true or false, got '" + v + "'");
  }

  json to_json() const {
    json j = json::object();
    for (const auto& [k, v] : values_) j[k] = v;
    return j;
  }

  // Subset of keys, for manifests that record only what a stage reads.
  json to_json(const std::vector<std::string>& keys) const {
    json j = json::object();
    for (const auto& k : keys) j[normalize_key(k)] = str(k);
    return j;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, std::string> values_;
};

}  // namespace protostyle
