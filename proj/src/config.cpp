#include "cryoseg/config.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace cryoseg {

void NetworkConfig::validate() const {
    if (depth < 2) throw std::invalid_argument("network.depth must be >= 2");
    if (base_channels < 1) throw std::invalid_argument("network.base_channels must be >= 1");
    if (growth_rate < 1) throw std::invalid_argument("network.growth_rate must be >= 1");
    if (input_size < 1 || input_size % (1 << depth) != 0)
        throw std::invalid_argument("network.input_size must be divisible by 2^depth");
}

void LossWeights::validate() const {
    if (lambda_rgb < 0 || lambda_h < 0 || lambda_seg_st < 0 || lambda_seg_sd < 0)
        throw std::invalid_argument("loss weights must be non-negative");
    if (lambda_rgb + lambda_h + lambda_seg_st + lambda_seg_sd <= 0)
        throw std::invalid_argument("at least one loss weight must be positive");
}

SchedulerKind scheduler_from_string(const std::string& s) {
    if (s == "exponential") return SchedulerKind::Exponential;
    if (s == "reduce_on_plateau") return SchedulerKind::ReduceOnPlateau;
    if (s == "cosine_annealing") return SchedulerKind::CosineAnnealing;
    if (s == "cosine_annealing_restarts") return SchedulerKind::CosineAnnealingRestarts;
    throw std::invalid_argument("unknown scheduler: " + s);
}

std::string to_string(SchedulerKind k) {
    switch (k) {
        case SchedulerKind::Exponential: return "exponential";
        case SchedulerKind::ReduceOnPlateau: return "reduce_on_plateau";
        case SchedulerKind::CosineAnnealing: return "cosine_annealing";
        case SchedulerKind::CosineAnnealingRestarts: return "cosine_annealing_restarts";
    }
    return "?";
}

void TrainConfig::validate() const {
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (lr_min <= 0 || lr_min > lr_max)
        throw std::invalid_argument("learning rates must satisfy 0 < lr_min <= lr_max");
    if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
    network.validate();
    loss_weights.validate();
}

std::string TrainConfig::to_text() const {
    std::ostringstream o;
    o.precision(17);
    o << "batch_size=" << batch_size << "\n";
    o << "lr_min=" << lr_min << "\n";
    o << "lr_max=" << lr_max << "\n";
    o << "scheduler=" << to_string(scheduler) << "\n";
    o << "epochs=" << epochs << "\n";
    o << "early_stop_patience=" << early_stop_patience << "\n";
    o << "seed=" << seed << "\n";
    o << "max_batches_per_epoch=" << max_batches_per_epoch << "\n";
    o << "rescale_hematoxylin=" << (rescale_hematoxylin ? 1 : 0) << "\n";
    o << "seg_st_mode=" << (seg_st_mode == SegStMode::Bce ? "bce" : "soft_dice") << "\n";
    o << "network.depth=" << network.depth << "\n";
    o << "network.base_channels=" << network.base_channels << "\n";
    o << "network.growth_rate=" << network.growth_rate << "\n";
    o << "network.input_size=" << network.input_size << "\n";
    o << "network.seg_takes_raw_input=" << (network.seg_takes_raw_input ? 1 : 0) << "\n";
    o << "loss.lambda_rgb=" << loss_weights.lambda_rgb << "\n";
    o << "loss.lambda_h=" << loss_weights.lambda_h << "\n";
    o << "loss.lambda_seg_st=" << loss_weights.lambda_seg_st << "\n";
    o << "loss.lambda_seg_sd=" << loss_weights.lambda_seg_sd << "\n";
    o << "augment.enabled=" << (augment_enabled ? 1 : 0) << "\n";
    o << "augment.p_hflip=" << augment.p_hflip << "\n";
    o << "augment.p_vflip=" << augment.p_vflip << "\n";
    o << "augment.rotate90=" << (augment.rotate90 ? 1 : 0) << "\n";
    o << "augment.p_crop=" << augment.p_crop << "\n";
    o << "augment.crop_size=" << augment.crop_size << "\n";
    o << "augment.p_elastic=" << augment.p_elastic << "\n";
    o << "augment.elastic_alpha=" << augment.elastic_alpha << "\n";
    o << "augment.elastic_sigma=" << augment.elastic_sigma << "\n";
    o << "post.sigma=" << postprocess.smoothing.sigma << "\n";
    o << "post.fg_threshold=" << postprocess.fg_threshold << "\n";
    o << "post.contour_threshold=" << postprocess.contour_threshold << "\n";
    o << "post.min_instance_px=" << postprocess.min_instance_px << "\n";
    o << "post.background_dilation_px=" << postprocess.background_dilation_px << "\n";
    return o.str();
}

TrainConfig TrainConfig::from_text(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        auto pos = line.find('=');
        if (pos == std::string::npos)
            throw std::invalid_argument("bad config line: " + line);
        kv[line.substr(0, pos)] = line.substr(pos + 1);
    }

    TrainConfig c;
    auto take = [&](const std::string& k) -> const std::string* {
        auto it = kv.find(k);
        if (it == kv.end()) return nullptr;
        return &it->second;
    };
    std::set<std::string> seen;
    auto geti = [&](const std::string& k, int& v) { seen.insert(k); if (auto* s = take(k)) v = std::stoi(*s); };
    auto getd = [&](const std::string& k, double& v) { seen.insert(k); if (auto* s = take(k)) v = std::stod(*s); };
    auto getb = [&](const std::string& k, bool& v) { seen.insert(k); if (auto* s = take(k)) v = std::stoi(*s) != 0; };
    seen.insert({"scheduler", "seed", "seg_st_mode"});

    geti("batch_size", c.batch_size);
    getd("lr_min", c.lr_min);
    getd("lr_max", c.lr_max);
    if (kv.count("scheduler")) c.scheduler = scheduler_from_string(kv.at("scheduler"));
    geti("epochs", c.epochs);
    geti("early_stop_patience", c.early_stop_patience);
    if (kv.count("seed")) c.seed = std::stoull(kv.at("seed"));
    geti("max_batches_per_epoch", c.max_batches_per_epoch);
    getb("rescale_hematoxylin", c.rescale_hematoxylin);
    if (kv.count("seg_st_mode")) {
        const std::string& m = kv.at("seg_st_mode");
        if (m == "bce") c.seg_st_mode = SegStMode::Bce;
        else if (m == "soft_dice") c.seg_st_mode = SegStMode::SoftDice;
        else throw std::invalid_argument("unknown seg_st_mode: " + m);
    }
    geti("network.depth", c.network.depth);
    geti("network.base_channels", c.network.base_channels);
    geti("network.growth_rate", c.network.growth_rate);
    geti("network.input_size", c.network.input_size);
    getb("network.seg_takes_raw_input", c.network.seg_takes_raw_input);
    getd("loss.lambda_rgb", c.loss_weights.lambda_rgb);
    getd("loss.lambda_h", c.loss_weights.lambda_h);
    getd("loss.lambda_seg_st", c.loss_weights.lambda_seg_st);
    getd("loss.lambda_seg_sd", c.loss_weights.lambda_seg_sd);
    getb("augment.enabled", c.augment_enabled);
    getd("augment.p_hflip", c.augment.p_hflip);
    getd("augment.p_vflip", c.augment.p_vflip);
    getb("augment.rotate90", c.augment.rotate90);
    getd("augment.p_crop", c.augment.p_crop);
    geti("augment.crop_size", c.augment.crop_size);
    getd("augment.p_elastic", c.augment.p_elastic);
    getd("augment.elastic_alpha", c.augment.elastic_alpha);
    getd("augment.elastic_sigma", c.augment.elastic_sigma);
    getd("post.sigma", c.postprocess.smoothing.sigma);
    getd("post.fg_threshold", c.postprocess.fg_threshold);
    getd("post.contour_threshold", c.postprocess.contour_threshold);
    geti("post.min_instance_px", c.postprocess.min_instance_px);
    geti("post.background_dilation_px", c.postprocess.background_dilation_px);
    for (const auto& [k, v] : kv)
        if (!seen.count(k)) throw std::invalid_argument("unknown config key: " + k);
    c.validate();
    return c;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot read config file: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return from_text(ss.str());
}

void TrainConfig::save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write config file: " + path.string());
    out << to_text();
}

std::uint64_t TrainConfig::hash() const {
    std::uint64_t h = 14695981039346656037ull;
    for (char ch : to_text()) {
        h ^= static_cast<unsigned char>(ch);
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace cryoseg
