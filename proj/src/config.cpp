#include "ifsr/config.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace ifsr::cfg {
namespace {

const std::map<std::string, std::string>& default_entries() {
    static const std::map<std::string, std::string> defaults = {
        {"seed", "1"},
        {"variant", "ifs_rcnn"},

        {"world.n_base", "5"},
        {"world.n_new", "3"},
        {"world.k_shots", "1"},
        {"world.base_scenes", "240"},
        {"world.test_scenes", "200"},
        {"world.min_objects", "1"},
        {"world.max_objects", "3"},
        {"world.occlusion_frac", "0.3"},
        {"world.occl_min", "0.1"},
        {"world.occl_max", "0.6"},
        {"world.size_min", "0.12"},
        {"world.size_max", "0.30"},
        {"world.aspect_spread", "0.0"},
        {"world.aspect_sd", "0.08"},
        {"world.instance_sd", "2.0"},
        {"world.proto_overlap_scaling", "true"},
        {"world.feat_dim", "24"},
        {"world.proto_dim", "8"},
        {"world.proto_gain", "2.0"},
        {"world.noise_dim", "4"},
        {"world.noise_scale", "0.15"},
        {"world.extractor_mix", "0.35"},
        {"world.extractor_squash", "0.5"},
        {"world.feat_scale", "1.0"},
        {"world.geom_sat", "0.07"},
        {"world.proposals_per_scene", "32"},
        {"world.negative_proposals", "8"},
        {"world.jitter_sigma", "0.05"},
        {"world.mask_grid", "14"},
        {"world.mask_feat_dim", "8"},
        {"world.mask_raster", "56"},

        {"train.lr_pretrain", "0.02"},
        {"train.lr_finetune", "0.01"},
        {"train.pretrain_iters", "6000"},
        {"train.phaseb_iters", "2000"},
        {"train.batch_scenes", "8"},
        {"train.decay1", "0.72"},
        {"train.decay2", "0.91"},
        {"train.decay_rate", "10"},
        {"train.finetune_iters", "0"},
        {"train.init_sd", "0.1"},
        {"train.lr_rho_scale", "1.0"},
        {"train.rho_init_var", "1.0"},
        {"train.box_init_from_base", "true"},
        {"train.grad_clip", "5.0"},
        {"train.grad_clip_finetune", "0.5"},
        {"train.lr_refiner_scale", "1.0"},
        {"train.lr_refiner_finetune_scale", "0.0"},

        {"loss.focal_gamma", "2.0"},
        {"loss.focal_alpha", "0.25"},
        {"loss.kl_weight", "auto"},
        {"loss.stop_grad_u", "false"},

        {"box.hidden", "32"},
        {"box.u_floor", "0.05"},

        {"thresholds.score_filter", "0.05"},
        {"thresholds.nms_iou", "0.5"},
        {"thresholds.match_iou_cls", "0.5"},
        {"thresholds.match_iou_box", "0.7"},

        {"probit.mc_infer_samples", "10"},
        {"probit.quad_nodes", "64"},

        {"eval.max_dets_per_class", "100"},
    };
    return defaults;
}

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

const std::vector<std::string>& known_variants() {
    static const std::vector<std::string> v = {
        "mask_rcnn_softmax", "mask_sigmoid",   "mask_probit",    "mask_mc",
        "mask_sig_uncert",   "mask_sig_gauss", "mask_sig_refine", "ifs_rcnn"};
    return v;
}

}  // namespace

Config::Config() : kv_(default_entries()) {}

void Config::load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("config: cannot open " + path);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config: missing '=' at " + path + ":" +
                                        std::to_string(lineno));
        set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
}

void Config::set(const std::string& key, const std::string& value) {
    if (kv_.find(key) == kv_.end())
        throw std::invalid_argument("config: unknown key '" + key + "'");
    kv_[key] = value;
}

const std::string& Config::get(const std::string& key) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) throw std::invalid_argument("config: unknown key '" + key + "'");
    return it->second;
}

double Config::get_double(const std::string& key) const {
    const std::string& v = get(key);
    std::size_t used = 0;
    double d;
    try {
        d = std::stod(v, &used);
    } catch (const std::exception&) {
        throw std::invalid_argument("config: '" + key + "' is not a number: " + v);
    }
    if (used != v.size()) throw std::invalid_argument("config: '" + key + "' is not a number: " + v);
    return d;
}

long Config::get_int(const std::string& key) const {
    const std::string& v = get(key);
    std::size_t used = 0;
    long n;
    try {
        n = std::stol(v, &used);
    } catch (const std::exception&) {
        throw std::invalid_argument("config: '" + key + "' is not an integer: " + v);
    }
    if (used != v.size())
        throw std::invalid_argument("config: '" + key + "' is not an integer: " + v);
    return n;
}

bool Config::get_bool(const std::string& key) const {
    const std::string& v = get(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw std::invalid_argument("config: '" + key + "' is not a boolean: " + v);
}

std::string Config::fingerprint() const {
    std::uint64_t h = fnv1a64("ifsr-config");
    for (const auto& [k, v] : kv_) {
        h = hash_combine(h, fnv1a64(k));
        h = hash_combine(h, fnv1a64(v));
    }
    std::ostringstream os;
    os << std::hex << h;
    return os.str();
}

void Config::validate() const {
    require(get_int("world.k_shots") >= 1, "config: world.k_shots must be >= 1");
    require(get_int("world.n_base") >= 1 && get_int("world.n_new") >= 1,
            "config: class counts must be >= 1");
    require(get_double("train.lr_pretrain") > 0.0 && get_double("train.lr_finetune") > 0.0,
            "config: learning rates must be positive");
    const std::string& var = get("variant");
    bool ok = false;
    for (const auto& v : known_variants()) ok = ok || v == var;
    require(ok, "config: unknown variant '" + var + "'");
    require(get_double("thresholds.score_filter") > 0.0 &&
                get_double("thresholds.score_filter") < 1.0,
            "config: score filter must be in (0,1)");
    require(get_int("world.feat_dim") ==
                get_int("world.proto_dim") + 11 + get_int("world.noise_dim") + 1,
            "config: world.feat_dim must equal the raw channel count plus the bias");
    require(get_int("world.proto_dim") >= get_int("world.n_base") + get_int("world.n_new"),
            "config: world.proto_dim must be >= the total class count");
    if (get("loss.kl_weight") != "auto") get_double("loss.kl_weight");
    get_bool("loss.stop_grad_u");
}

world::WorldConfig Config::world_config() const {
    world::WorldConfig w;
    w.seed = static_cast<std::uint64_t>(get_int("seed"));
    w.n_base = static_cast<std::size_t>(get_int("world.n_base"));
    w.n_new = static_cast<std::size_t>(get_int("world.n_new"));
    w.shots = static_cast<std::size_t>(get_int("world.k_shots"));
    w.base_scenes = static_cast<std::size_t>(get_int("world.base_scenes"));
    w.test_scenes = static_cast<std::size_t>(get_int("world.test_scenes"));
    w.min_objects = static_cast<std::size_t>(get_int("world.min_objects"));
    w.max_objects = static_cast<std::size_t>(get_int("world.max_objects"));
    w.occlusion_frac = get_double("world.occlusion_frac");
    w.occl_min = get_double("world.occl_min");
    w.occl_max = get_double("world.occl_max");
    w.size_min = get_double("world.size_min");
    w.size_max = get_double("world.size_max");
    w.aspect_spread = get_double("world.aspect_spread");
    w.aspect_sd = get_double("world.aspect_sd");
    w.instance_sd = get_double("world.instance_sd");
    w.proto_overlap_scaling = get_bool("world.proto_overlap_scaling");
    w.feat_dim = static_cast<std::size_t>(get_int("world.feat_dim"));
    w.proto_dim = static_cast<std::size_t>(get_int("world.proto_dim"));
    w.proto_gain = get_double("world.proto_gain");
    w.noise_dim = static_cast<std::size_t>(get_int("world.noise_dim"));
    w.noise_scale = get_double("world.noise_scale");
    w.extractor_mix = get_double("world.extractor_mix");
    w.extractor_squash = get_double("world.extractor_squash");
    w.feat_scale = get_double("world.feat_scale");
    w.geom_sat = get_double("world.geom_sat");
    w.proposals_per_scene = static_cast<std::size_t>(get_int("world.proposals_per_scene"));
    w.negative_proposals = static_cast<std::size_t>(get_int("world.negative_proposals"));
    w.jitter_sigma = get_double("world.jitter_sigma");
    w.mask_grid = static_cast<std::size_t>(get_int("world.mask_grid"));
    w.mask_feat_dim = static_cast<std::size_t>(get_int("world.mask_feat_dim"));
    w.mask_raster = static_cast<std::size_t>(get_int("world.mask_raster"));
    return w;
}

cls::FocalParams Config::focal() const {
    return {get_double("loss.focal_gamma"), get_double("loss.focal_alpha")};
}

double Config::kl_weight() const {
    const std::string& v = get("loss.kl_weight");
    if (v == "auto") {
        // one over the number of binary fine-tuning targets, so the prior's
        // pull weakens as shots accumulate
        const double n = static_cast<double>(get_int("world.k_shots") * get_int("world.n_new") *
                                             get_int("world.proposals_per_scene") *
                                             get_int("world.n_new"));
        return 1.0 / n;
    }
    return get_double("loss.kl_weight");
}

std::size_t Config::finetune_iters() const {
    const long explicit_iters = get_int("train.finetune_iters");
    if (explicit_iters > 0) return static_cast<std::size_t>(explicit_iters);
    const double k = static_cast<double>(get_int("world.k_shots"));
    const double ramp = 500.0 + (6000.0 - 500.0) * (std::min(k, 30.0) - 1.0) / 29.0;
    return static_cast<std::size_t>(std::lround(ramp));
}

}  // namespace ifsr::cfg
