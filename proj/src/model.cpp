#include "ehrseq/model.hpp"

#include <cstring>
#include <fstream>

using nlohmann::json;

namespace ehrseq::model {

namespace {

constexpr char kMagic[8] = {'E', 'H', 'R', 'S', 'E', 'Q', '0', '1'};

void write_u64_le(std::ostream& out, uint64_t v) {
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(buf), 8);
}

uint64_t read_u64_le(std::istream& in) {
    unsigned char buf[8];
    in.read(reinterpret_cast<char*>(buf), 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(buf[i]) << (8 * i);
    return v;
}

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);

    Params<float>& params = const_cast<Params<float>&>(ck.params);
    json arrays = json::array();
    for (auto& ref : params.array_refs()) {
        arrays.push_back(json{{"name", ref.name}, {"shape", ref.shape}});
    }
    const json manifest{{"config", ck.config.to_json()},
                        {"seed", ck.seed},
                        {"step", ck.step},
                        {"vocab", ck.vocab.to_json()},
                        {"arrays", std::move(arrays)}};
    const std::string mbytes = manifest.dump();

    out.write(kMagic, sizeof(kMagic));
    write_u64_le(out, mbytes.size());
    out.write(mbytes.data(), static_cast<std::streamsize>(mbytes.size()));
    static_assert(sizeof(float) == 4);
    for (auto& ref : params.array_refs()) {
        out.write(reinterpret_cast<const char*>(ref.data->data()),
                  static_cast<std::streamsize>(ref.data->size() * sizeof(float)));
    }
    if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);

    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw std::runtime_error("not a checkpoint file: " + path);
    }
    const uint64_t mlen = read_u64_le(in);
    std::string mbytes(mlen, '\0');
    in.read(mbytes.data(), static_cast<std::streamsize>(mlen));
    if (!in) throw std::runtime_error("truncated checkpoint manifest: " + path);
    const json manifest = json::parse(mbytes);

    Checkpoint ck;
    ck.config = ModelConfig::from_json(manifest.at("config"));
    ck.seed = manifest.at("seed").get<uint64_t>();
    ck.step = manifest.at("step").get<int64_t>();
    ck.vocab = pipe::Vocabulary::from_json(manifest.at("vocab"));
    ck.params = Params<float>(ck.config);

    auto refs = ck.params.array_refs();
    const auto& arrays = manifest.at("arrays");
    if (arrays.size() != refs.size()) {
        throw std::runtime_error("checkpoint array list does not match config: " + path);
    }
    for (size_t i = 0; i < refs.size(); ++i) {
        const auto& meta = arrays[i];
        if (meta.at("name").get<std::string>() != refs[i].name ||
            meta.at("shape").get<std::vector<int>>() != refs[i].shape) {
            throw std::runtime_error("checkpoint array mismatch at " + refs[i].name);
        }
        in.read(reinterpret_cast<char*>(refs[i].data->data()),
                static_cast<std::streamsize>(refs[i].data->size() * sizeof(float)));
        if (!in) throw std::runtime_error("truncated checkpoint data at " + refs[i].name);
    }
    return ck;
}

}  // namespace ehrseq::model
