// SPDX-License-Identifier: Apache-2.0
#include "esft/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "esft/config_json.hpp"

namespace esft {
namespace {

constexpr char kMagic[8] = {'E', 'S', 'F', 'T', 'C', 'K', 'P', 'T'};

// The raw f64 blocks assume a little-endian host, which covers every target
// this artifact runs on; the loader re-validates sizes, not byte order.
void write_u64(std::ofstream& out, uint64_t v) {
    char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out.write(buf, 8);
}

uint64_t read_u64(std::ifstream& in) {
    char buf[8];
    in.read(buf, 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(buf[i])) << (8 * i);
    return v;
}

} // namespace

void save_checkpoint(const MoEModel& model, const std::string& path) {
    const std::vector<ParamGroup> groups = model.param_groups();
    nlohmann::json manifest = nlohmann::json::array();
    uint64_t offset = 0;
    for (const ParamGroup& g : groups) {
        manifest.push_back(nlohmann::json{{"name", g.name},
                                          {"shape", g.tensor.shape()},
                                          {"offset", offset},
                                          {"numel", g.tensor.numel()}});
        offset += static_cast<uint64_t>(g.tensor.numel()) * sizeof(double);
    }
    nlohmann::json header{{"schema_version", 1},
                          {"config", config_to_json(model.config())},
                          {"params", std::move(manifest)}};
    if (model.lora()) {
        header["lora"] = {{"rank", model.lora()->rank}, {"scaling", model.lora()->scaling}};
    }
    const std::string header_str = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot open '" + path + "' for writing");
    out.write(kMagic, sizeof(kMagic));
    write_u64(out, header_str.size());
    out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    for (const ParamGroup& g : groups) {
        out.write(reinterpret_cast<const char*>(g.tensor.data().data()),
                  static_cast<std::streamsize>(g.tensor.numel() * sizeof(double)));
    }
    if (!out) throw InputError("write to '" + path + "' failed");
}

MoEModel load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open checkpoint '" + path + "'");
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw InputError("'" + path + "' is not a checkpoint file (bad magic)");
    }
    const uint64_t header_len = read_u64(in);
    std::string header_str(header_len, '\0');
    in.read(header_str.data(), static_cast<std::streamsize>(header_len));
    if (!in) throw InputError("checkpoint '" + path + "' is truncated in the header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_str);
    } catch (const nlohmann::json::exception& e) {
        throw InputError("checkpoint header is not valid JSON: " + std::string(e.what()));
    }

    MoEModel model(config_from_json(header.at("config")));
    if (header.contains("lora")) {
        Rng rng(0); // adapter values are overwritten below
        model.attach_lora(header["lora"].at("rank").get<int>(),
                          header["lora"].at("scaling").get<double>(), rng);
    }

    std::vector<ParamGroup> groups = model.param_groups();
    const auto& manifest = header.at("params");
    if (manifest.size() != groups.size()) {
        throw InputError("checkpoint holds " + std::to_string(manifest.size()) +
                         " parameter groups, model expects " + std::to_string(groups.size()));
    }
    for (size_t i = 0; i < groups.size(); ++i) {
        const auto& entry = manifest[i];
        const std::string name = entry.at("name").get<std::string>();
        if (name != groups[i].name) {
            throw InputError("checkpoint group '" + name + "' does not match expected '" +
                             groups[i].name + "'");
        }
        const auto shape = entry.at("shape").get<std::vector<int>>();
        if (shape != groups[i].tensor.shape()) {
            throw InputError("checkpoint group '" + name + "' shape mismatch");
        }
        std::vector<double>& dst = groups[i].tensor.data_mut();
        in.read(reinterpret_cast<char*>(dst.data()),
                static_cast<std::streamsize>(dst.size() * sizeof(double)));
        if (!in) throw InputError("checkpoint '" + path + "' is truncated in group '" + name + "'");
    }
    return model;
}

} // namespace esft
