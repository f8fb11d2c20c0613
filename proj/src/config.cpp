#include "uccl/config.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <vector>

#include <openssl/evp.h>

namespace uccl {

namespace {

using nlohmann::json;

struct Field {
    const char* key;
    std::function<json(const TrainConfig&)> get;
    std::function<void(TrainConfig&, const json&)> set;
};

template <typename V>
Field bind(const char* key, V TrainConfig::*member) {
    return {key, [member](const TrainConfig& c) { return json(c.*member); },
            [member](TrainConfig& c, const json& v) { c.*member = v.get<V>(); }};
}

template <typename Sub, typename V>
Field bind(const char* key, Sub TrainConfig::*sub, V Sub::*member) {
    return {key, [sub, member](const TrainConfig& c) { return json((c.*sub).*member); },
            [sub, member](TrainConfig& c, const json& v) { (c.*sub).*member = v.get<V>(); }};
}

const std::vector<Field>& fields() {
    static const std::vector<Field> table = {
        // Image size and class count are shared by the dataset and the model.
        {"height", [](const TrainConfig& c) { return json(c.dataset.height); },
         [](TrainConfig& c, const json& v) { c.dataset.height = c.model.image_height = v.get<int>(); }},
        {"width", [](const TrainConfig& c) { return json(c.dataset.width); },
         [](TrainConfig& c, const json& v) { c.dataset.width = c.model.image_width = v.get<int>(); }},
        {"num_classes", [](const TrainConfig& c) { return json(c.dataset.num_classes); },
         [](TrainConfig& c, const json& v) { c.dataset.num_classes = c.model.num_classes = v.get<int>(); }},
        bind("min_shapes", &TrainConfig::dataset, &DatasetConfig::min_shapes),
        bind("max_shapes", &TrainConfig::dataset, &DatasetConfig::max_shapes),
        bind("noise", &TrainConfig::dataset, &DatasetConfig::noise),
        bind("total", &TrainConfig::dataset, &DatasetConfig::total),
        bind("val_count", &TrainConfig::dataset, &DatasetConfig::val_count),
        bind("data_seed", &TrainConfig::dataset, &DatasetConfig::seed),
        bind("feature_dim", &TrainConfig::model, &ModelConfig::feature_dim),
        bind("stride", &TrainConfig::model, &ModelConfig::stride),
        bind("blocks", &TrainConfig::model, &ModelConfig::blocks),
        bind("bn_momentum", &TrainConfig::model, &ModelConfig::bn_momentum),
        bind("bn_eps", &TrainConfig::model, &ModelConfig::bn_eps),
        bind("hflip_prob", &TrainConfig::augment, &AugmentConfig::hflip_prob),
        bind("vflip_prob", &TrainConfig::augment, &AugmentConfig::vflip_prob),
        bind("photometric", &TrainConfig::augment, &AugmentConfig::photometric),
        bind("jitter_prob", &TrainConfig::augment, &AugmentConfig::jitter_prob),
        bind("jitter_min", &TrainConfig::augment, &AugmentConfig::jitter_min),
        bind("jitter_max", &TrainConfig::augment, &AugmentConfig::jitter_max),
        bind("gray_prob", &TrainConfig::augment, &AugmentConfig::gray_prob),
        bind("blur_prob", &TrainConfig::augment, &AugmentConfig::blur_prob),
        bind("blur_sigma_min", &TrainConfig::augment, &AugmentConfig::blur_sigma_min),
        bind("blur_sigma_max", &TrainConfig::augment, &AugmentConfig::blur_sigma_max),
        bind("tau", &TrainConfig::tau),
        bind("alpha", &TrainConfig::alpha),
        bind("beta", &TrainConfig::beta),
        bind("base_lr", &TrainConfig::base_lr),
        bind("momentum", &TrainConfig::momentum),
        bind("weight_decay", &TrainConfig::weight_decay),
        bind("epochs", &TrainConfig::epochs),
        bind("batch_size", &TrainConfig::batch_size),
        bind("seed", &TrainConfig::seed),
        {"ratio", [](const TrainConfig& c) { return json(c.ratio.str()); },
         [](TrainConfig& c, const json& v) { c.ratio = Ratio::parse(v.get<std::string>()); }},
        bind("enable_sbu", &TrainConfig::enable_sbu),
        bind("enable_ckr", &TrainConfig::enable_ckr),
        bind("eval_every", &TrainConfig::eval_every),
        bind("data_dir", &TrainConfig::data_dir),
    };
    return table;
}

}  // namespace

nlohmann::json to_json(const TrainConfig& cfg) {
    json out = json::object();
    for (const auto& f : fields()) out[f.key] = f.get(cfg);
    return out;
}

TrainConfig config_from_json(const nlohmann::json& flat) {
    if (!flat.is_object()) throw std::invalid_argument("config: expected a flat JSON object");
    TrainConfig cfg;
    for (const auto& [key, value] : flat.items()) {
        const auto& table = fields();
        auto it = std::find_if(table.begin(), table.end(), [&](const Field& f) { return key == f.key; });
        if (it == table.end()) throw std::invalid_argument("config: unknown key '" + key + "'");
        try {
            it->set(cfg, value);
        } catch (const json::exception& e) {
            throw std::invalid_argument("config: bad value for '" + key + "': " + e.what());
        }
    }
    cfg.validate();
    return cfg;
}

TrainConfig load_config(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw std::invalid_argument("cannot open config " + file.string());
    json flat;
    try {
        flat = json::parse(in, nullptr, true, true);
    } catch (const json::parse_error& e) {
        throw std::invalid_argument("config " + file.string() + ": " + e.what());
    }
    return config_from_json(flat);
}

void save_config(const std::filesystem::path& file, const TrainConfig& cfg) {
    std::ofstream out(file, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + file.string());
    out << to_json(cfg).dump(2) << '\n';
    if (!out) throw std::runtime_error("write failed: " + file.string());
}

std::string config_hash(const TrainConfig& cfg) {
    const std::string text = to_json(cfg).dump();
    std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
    unsigned int len = 0;
    if (EVP_Digest(text.data(), text.size(), digest.data(), &len, EVP_sha256(), nullptr) != 1) {
        throw std::runtime_error("config_hash: SHA-256 failed");
    }
    std::string hex;
    char buf[3];
    for (unsigned int i = 0; i < 8; ++i) {
        std::snprintf(buf, sizeof buf, "%02x", digest[i]);
        hex += buf;
    }
    return hex;
}

}  // namespace uccl
