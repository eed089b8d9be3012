#include "segcomp/runconfig.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "segcomp/error.hpp"
#include "segcomp/uncertainty.hpp"

namespace segcomp {

namespace {

std::string trim(const std::string& s) {
    size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

std::string strip_quotes(const std::string& s) {
    if (s.size() >= 2 && ((s.front() == '"' && s.back() == '"') ||
                          (s.front() == '\'' && s.back() == '\'')))
        return s.substr(1, s.size() - 2);
    return s;
}

}  // namespace

bool KvConfig::has(const std::string& section, const std::string& key) const {
    auto s = sections.find(section);
    return s != sections.end() && s->second.count(key) > 0;
}

std::string KvConfig::get(const std::string& section, const std::string& key) const {
    auto s = sections.find(section);
    if (s == sections.end() || !s->second.count(key))
        throw ConfigError("missing config key [" + section + "] " + key);
    return s->second.at(key);
}

std::string KvConfig::get_or(const std::string& section, const std::string& key,
                             const std::string& fallback) const {
    return has(section, key) ? get(section, key) : fallback;
}

int KvConfig::get_int(const std::string& section, const std::string& key, int fallback) const {
    if (!has(section, key)) return fallback;
    try {
        size_t pos = 0;
        const std::string v = get(section, key);
        const int out = std::stoi(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("config key [" + section + "] " + key + " is not an integer");
    }
}

double KvConfig::get_double(const std::string& section, const std::string& key,
                            double fallback) const {
    if (!has(section, key)) return fallback;
    try {
        size_t pos = 0;
        const std::string v = get(section, key);
        const double out = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("config key [" + section + "] " + key + " is not a number");
    }
}

bool KvConfig::get_bool(const std::string& section, const std::string& key,
                        bool fallback) const {
    if (!has(section, key)) return fallback;
    const std::string v = get(section, key);
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("config key [" + section + "] " + key + " is not a boolean");
}

uint64_t KvConfig::get_u64(const std::string& section, const std::string& key,
                           uint64_t fallback) const {
    if (!has(section, key)) return fallback;
    try {
        size_t pos = 0;
        const std::string v = get(section, key);
        const uint64_t out = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("config key [" + section + "] " + key + " is not an unsigned integer");
    }
}

KvConfig parse_config_text(const std::string& text) {
    KvConfig cfg;
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError("line " + std::to_string(lineno) + ": unterminated section");
            section = trim(line.substr(1, line.size() - 2));
            if (section.empty())
                throw ConfigError("line " + std::to_string(lineno) + ": empty section name");
            cfg.sections[section];
            continue;
        }
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = strip_quotes(trim(line.substr(eq + 1)));
        if (key.empty())
            throw ConfigError("line " + std::to_string(lineno) + ": empty key");
        if (section.empty())
            throw ConfigError("line " + std::to_string(lineno) + ": key outside any section");
        cfg.sections[section][key] = value;
    }
    return cfg;
}

KvConfig parse_config_file(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw ConfigError("cannot open config file " + file.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str());
}

std::vector<std::string> split_list(const std::string& value) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(value);
    while (std::getline(in, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

std::string hash_bytes_hex(const std::string& bytes) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

namespace {

std::vector<int> parse_int_list(const std::string& value, const char* what) {
    std::vector<int> out;
    for (const auto& item : split_list(value)) {
        try {
            out.push_back(std::stoi(item));
        } catch (const std::exception&) {
            throw ConfigError(std::string(what) + ": bad integer '" + item + "'");
        }
    }
    return out;
}

std::vector<uint64_t> parse_u64_list(const std::string& value, const char* what) {
    std::vector<uint64_t> out;
    for (const auto& item : split_list(value)) {
        try {
            out.push_back(std::stoull(item));
        } catch (const std::exception&) {
            throw ConfigError(std::string(what) + ": bad seed '" + item + "'");
        }
    }
    return out;
}

// "a:b:c" triple fields
std::vector<std::string> split_colon(const std::string& item) {
    std::vector<std::string> parts;
    std::string p;
    std::istringstream in(item);
    while (std::getline(in, p, ':')) parts.push_back(trim(p));
    return parts;
}

std::vector<ClassPair> parse_pairs(const std::string& value) {
    std::vector<ClassPair> out;
    for (const auto& item : split_list(value)) {
        const auto parts = split_colon(item);
        if (parts.size() != 2) throw ConfigError("pair must be 'a:b', got '" + item + "'");
        try {
            out.push_back({std::stoi(parts[0]), std::stoi(parts[1])});
        } catch (const std::exception&) {
            throw ConfigError("bad class pair '" + item + "'");
        }
    }
    return out;
}

std::vector<AmbiguousPair> parse_ambiguous_pairs(const std::string& value) {
    std::vector<AmbiguousPair> out;
    for (const auto& item : split_list(value)) {
        const auto parts = split_colon(item);
        if (parts.size() != 3)
            throw ConfigError("ambiguous pair must be 'a:b:similarity', got '" + item + "'");
        try {
            AmbiguousPair ap;
            ap.classes = {std::stoi(parts[0]), std::stoi(parts[1])};
            ap.similarity = std::stod(parts[2]);
            out.push_back(ap);
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception&) {
            throw ConfigError("bad ambiguous pair '" + item + "'");
        }
    }
    return out;
}

// sparse induction matrix: "i:j:value" triples
void parse_induction(const std::string& value, InductionSpec& spec) {
    for (const auto& item : split_list(value)) {
        const auto parts = split_colon(item);
        if (parts.size() != 3)
            throw ConfigError("induction entry must be 'i:j:value', got '" + item + "'");
        int i, j;
        double x;
        try {
            i = std::stoi(parts[0]);
            j = std::stoi(parts[1]);
            x = std::stod(parts[2]);
        } catch (const std::exception&) {
            throw ConfigError("bad induction entry '" + item + "'");
        }
        if (i < 0 || i >= spec.num_classes || j < 0 || j >= spec.num_classes)
            throw ConfigError("induction entry index out of range in '" + item + "'");
        spec.matrix[static_cast<size_t>(i) * spec.num_classes + j] = x;
    }
}

}  // namespace

RunConfig load_run_config(const std::filesystem::path& file) {
    std::ifstream raw(file, std::ios::binary);
    if (!raw) throw ConfigError("cannot open config file " + file.string());
    std::stringstream ss;
    ss << raw.rdbuf();
    const std::string bytes = ss.str();
    const KvConfig kv = parse_config_text(bytes);

    RunConfig rc;
    rc.config_hash = hash_bytes_hex(bytes);

    // [dataset]
    rc.scene.height = kv.get_int("dataset", "height", rc.scene.height);
    rc.scene.width = kv.get_int("dataset", "width", rc.scene.width);
    rc.scene.feature_dim = kv.get_int("dataset", "feature_dim", rc.scene.feature_dim);
    rc.scene.num_classes = kv.get_int("dataset", "num_classes", rc.scene.num_classes);
    rc.scene.num_regions = kv.get_int("dataset", "num_regions", rc.scene.num_regions);
    rc.scene.noise_std = kv.get_double("dataset", "noise_std", rc.scene.noise_std);
    rc.scene.boundary_mix_width =
        kv.get_int("dataset", "boundary_mix_width", rc.scene.boundary_mix_width);
    rc.scene.seed = kv.get_u64("dataset", "seed", rc.scene.seed);
    if (kv.has("dataset", "ambiguous_pairs"))
        rc.scene.ambiguous_pairs = parse_ambiguous_pairs(kv.get("dataset", "ambiguous_pairs"));
    if (kv.has("dataset", "class_names"))
        rc.scene.class_names = split_list(kv.get("dataset", "class_names"));
    rc.train_images = kv.get_int("dataset", "train_images", rc.train_images);
    rc.val_images = kv.get_int("dataset", "val_images", rc.val_images);
    if (kv.has("dataset", "train_dir")) rc.train_dir = kv.get("dataset", "train_dir");
    if (kv.has("dataset", "val_dir")) rc.val_dir = kv.get("dataset", "val_dir");

    // [train]
    rc.train.steps = kv.get_int("train", "steps", rc.train.steps);
    rc.train.batch_size = kv.get_int("train", "batch_size", rc.train.batch_size);
    rc.train.lr = kv.get_double("train", "lr", rc.train.lr);
    rc.train.momentum = kv.get_double("train", "momentum", rc.train.momentum);
    rc.train.poly_decay_power =
        kv.get_double("train", "poly_decay_power", rc.train.poly_decay_power);
    rc.train.alpha = kv.get_double("train", "alpha", rc.train.alpha);
    rc.train.symmetric = kv.get_bool("train", "symmetric", rc.train.symmetric);
    rc.train.compensation_enabled =
        kv.get_bool("train", "compensation", rc.train.compensation_enabled);
    rc.train.seed = kv.get_u64("train", "seed", rc.train.seed);
    rc.train.eval_every = kv.get_int("train", "eval_every", rc.train.eval_every);
    rc.hidden = kv.get_int("train", "hidden", rc.hidden);

    // [method]
    rc.method = method_from_name(kv.get_or("method", "name", "ours"));
    if (rc.method == Method::ours_sym) rc.train.symmetric = true;
    rc.bnn_dropout = kv.get_double("method", "bnn_dropout", rc.bnn_dropout);
    rc.bnn_samples = kv.get_int("method", "bnn_samples", rc.bnn_samples);

    // [experiment]
    if (kv.has("experiment", "noise_levels"))
        rc.noise_levels = parse_int_list(kv.get("experiment", "noise_levels"), "noise_levels");
    if (kv.has("experiment", "seeds"))
        rc.exp_seeds = parse_u64_list(kv.get("experiment", "seeds"), "seeds");
    if (rc.exp_seeds.empty()) rc.exp_seeds = {rc.train.seed};
    if (kv.has("experiment", "pairs"))
        rc.noise_pairs = parse_pairs(kv.get("experiment", "pairs"));
    if (kv.has("experiment", "k_list"))
        rc.k_list = parse_int_list(kv.get("experiment", "k_list"), "k_list");
    rc.top_k = kv.get_int("experiment", "top_k", rc.top_k);
    rc.phi = kv.get_double("experiment", "phi", rc.phi);
    rc.r_step = kv.get_double("experiment", "r_step", rc.r_step);
    rc.r_max = kv.get_double("experiment", "r_max", rc.r_max);
    rc.induction = InductionSpec::zero(rc.scene.num_classes);
    if (kv.has("experiment", "induction"))
        parse_induction(kv.get("experiment", "induction"), rc.induction);
    const std::string relax = kv.get_or("experiment", "relaxation", "soft");
    if (relax == "soft")
        rc.relaxation = InductionSpec::Relaxation::soft;
    else if (relax == "hard")
        rc.relaxation = InductionSpec::Relaxation::hard;
    else
        throw ConfigError("relaxation must be 'soft' or 'hard'");
    const std::string bsrc = kv.get_or("experiment", "beta_source", "branch");
    if (bsrc == "branch")
        rc.beta_source = InductionSpec::BetaSource::branch;
    else if (bsrc == "one")
        rc.beta_source = InductionSpec::BetaSource::one;
    else
        throw ConfigError("beta_source must be 'branch' or 'one'");
    rc.induction.relaxation = rc.relaxation;
    rc.induction.beta_source = rc.beta_source;
    if (kv.has("experiment", "checkpoint")) rc.checkpoint = kv.get("experiment", "checkpoint");

    // [output]
    rc.output_dir = kv.get_or("output", "dir", rc.output_dir.string());

    rc.scene.validate();
    rc.train.validate();
    if (rc.hidden < 1) throw ConfigError("hidden width must be >= 1");
    if (rc.train_images < 1) throw ConfigError("train_images must be >= 1");
    if (rc.val_images < 0) throw ConfigError("val_images must be >= 0");
    if (rc.top_k < 0 || rc.top_k > rc.scene.num_classes)
        throw ConfigError("top_k must lie in [1, K] (or 0 for the default)");
    if (!(rc.phi > 0.0)) throw ConfigError("phi must be > 0");
    if (!(rc.r_step > 0.0) || rc.r_max < rc.r_step || rc.r_max > 1.0)
        throw ConfigError("invalid correction grid (r_step, r_max)");
    return rc;
}

SplitDataset resolve_dataset(const RunConfig& cfg) {
    SplitDataset out;
    if (cfg.train_dir)
        out.train = read_dataset(*cfg.train_dir);
    else
        out.train = generate_dataset(cfg.scene, cfg.train_images, 0);
    if (cfg.val_dir)
        out.val = read_dataset(*cfg.val_dir);
    else if (cfg.val_images > 0)
        out.val = generate_dataset(cfg.scene, cfg.val_images, cfg.train_images);
    else {
        out.val.num_classes = out.train.num_classes;
        out.val.class_names = out.train.class_names;
        out.val.seed = out.train.seed;
    }
    return out;
}

}  // namespace segcomp
