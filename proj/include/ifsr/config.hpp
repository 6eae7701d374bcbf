#pragma once

#include <map>
#include <string>

#include "ifsr/classifier.hpp"
#include "ifsr/toy_world.hpp"

namespace ifsr::cfg {

/// Flat key=value configuration with dotted namespaces. Every key has a
/// built-in default (mirrored in configs/default.cfg); unknown keys are
/// rejected so typos fail loudly.
class Config {
  public:
    Config();  // defaults

    /// Parse a config file: one key=value per line, '#' comments.
    void load_file(const std::string& path);
    /// Override one key; value is validated lazily by the typed getters.
    void set(const std::string& key, const std::string& value);

    const std::string& get(const std::string& key) const;
    double get_double(const std::string& key) const;
    long get_int(const std::string& key) const;
    bool get_bool(const std::string& key) const;

    const std::map<std::string, std::string>& entries() const { return kv_; }

    /// Content hash of the resolved key/value map.
    std::string fingerprint() const;

    /// Throws std::invalid_argument on out-of-range values (K < 1,
    /// non-positive rates, unknown variant, ...).
    void validate() const;

    // materialized views
    world::WorldConfig world_config() const;
    cls::FocalParams focal() const;
    /// loss.kl_weight, "auto" resolving to 1 / (K * N_new).
    double kl_weight() const;
    /// train.finetune_iters, 0 resolving to the 500..6000 ramp over K=1..30.
    std::size_t finetune_iters() const;

  private:
    std::map<std::string, std::string> kv_;
};

}  // namespace ifsr::cfg
