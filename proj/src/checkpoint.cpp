#include "segcomp/checkpoint.hpp"

#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "segcomp/error.hpp"

namespace segcomp {

namespace {

constexpr char kMagic[] = "SEGCOMP-CKPT v1";

std::vector<const std::vector<double>*> model_streams(const SegModel& m) {
    return {&m.conv1_w.v, &m.conv1_b.v, &m.conv2_w.v, &m.conv2_b.v, &m.head_w.v,
            &m.head_b.v,  &m.br1_w.v,   &m.bn_gamma.v, &m.bn_beta.v,
            &m.br2_w.v,   &m.br2_b.v,   &m.bn_rmean,  &m.bn_rvar};
}

std::vector<std::vector<double>*> model_streams(SegModel& m) {
    return {&m.conv1_w.v, &m.conv1_b.v, &m.conv2_w.v, &m.conv2_b.v, &m.head_w.v,
            &m.head_b.v,  &m.br1_w.v,   &m.bn_gamma.v, &m.bn_beta.v,
            &m.br2_w.v,   &m.br2_b.v,   &m.bn_rmean,  &m.bn_rvar};
}

}  // namespace

void save_checkpoint(const std::filesystem::path& file, const SegModel& model,
                     const CompensationMatrix* comp) {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint " + file.string());

    nlohmann::ordered_json meta;
    meta["in_dim"] = model.dims.in_dim;
    meta["hidden"] = model.dims.hidden;
    meta["num_classes"] = model.dims.num_classes;
    meta["dropout_rate"] = model.dropout_rate;
    meta["bn_eps"] = model.bn_eps;
    meta["bn_momentum"] = model.bn_momentum;
    meta["comp_mode"] = comp ? comp_mode_name(comp->mode) : "none";
    out << kMagic << "\n" << meta.dump() << "\n";

    auto write_doubles = [&](const std::vector<double>& xs) {
        out.write(reinterpret_cast<const char*>(xs.data()),
                  static_cast<std::streamsize>(xs.size() * sizeof(double)));
    };
    for (const auto* s : model_streams(model)) write_doubles(*s);
    if (comp) write_doubles(comp->p.v);
    if (!out) throw DataError("short write to checkpoint " + file.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint " + file.string());

    std::string magic, meta_line;
    if (!std::getline(in, magic) || magic != kMagic)
        throw DataError("bad checkpoint magic in " + file.string());
    if (!std::getline(in, meta_line)) throw DataError("missing checkpoint metadata");

    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(meta_line);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed checkpoint metadata: ") + e.what());
    }

    Checkpoint ckpt;
    try {
        SegModelDims dims;
        dims.in_dim = meta.at("in_dim").get<int>();
        dims.hidden = meta.at("hidden").get<int>();
        dims.num_classes = meta.at("num_classes").get<int>();
        ckpt.model = SegModel::zeros(dims);
        ckpt.model.dropout_rate = meta.at("dropout_rate").get<double>();
        ckpt.model.bn_eps = meta.at("bn_eps").get<double>();
        ckpt.model.bn_momentum = meta.at("bn_momentum").get<double>();
        const std::string mode = meta.at("comp_mode").get<std::string>();
        if (mode != "none")
            ckpt.comp =
                CompensationMatrix::zeros(dims.num_classes, comp_mode_from_name(mode));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed checkpoint metadata: ") + e.what());
    }

    auto read_doubles = [&](std::vector<double>& xs) {
        in.read(reinterpret_cast<char*>(xs.data()),
                static_cast<std::streamsize>(xs.size() * sizeof(double)));
        if (in.gcount() != static_cast<std::streamsize>(xs.size() * sizeof(double)))
            throw DataError("truncated checkpoint " + file.string());
    };
    for (auto* s : model_streams(ckpt.model)) read_doubles(*s);
    if (ckpt.comp) read_doubles(ckpt.comp->p.v);
    char extra;
    if (in.read(&extra, 1))
        throw DataError("trailing bytes in checkpoint " + file.string());
    return ckpt;
}

}  // namespace segcomp
