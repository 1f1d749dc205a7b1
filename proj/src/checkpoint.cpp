#include "dedit/checkpoint.hpp"

#include <cstring>

#include "dedit/io_util.hpp"
#include "json.hpp"

namespace dedit {

namespace {

constexpr char kMagic[4] = {'D', 'E', 'D', 'T'};
constexpr std::uint32_t kVersion = 1;

using Json = nlohmann::ordered_json;

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const ParamSetT<float>& params,
                                               const RunConfig& config, long step) {
    Json header;
    header["config"] = Json::parse(run_config_to_json(config, -1));
    header["step"] = step;
    header["tensors"] = Json::array();

    std::uint64_t offset = 0;
    params.for_each([&](const std::string& name, const TensorF& t, bool frozen) {
        Json jt;
        jt["name"] = name;
        jt["shape"] = t.shape();
        jt["dtype"] = "f32";
        jt["offset"] = offset;
        jt["frozen"] = frozen;
        header["tensors"].push_back(std::move(jt));
        offset += t.size() * sizeof(float);
    });

    const std::string htext = header.dump();
    std::vector<std::uint8_t> out;
    out.reserve(4 + 4 + 8 + htext.size() + offset);
    out.insert(out.end(), kMagic, kMagic + 4);
    put_le(out, kVersion);
    put_le(out, static_cast<std::uint64_t>(htext.size()));
    out.insert(out.end(), htext.begin(), htext.end());
    params.for_each([&](const std::string&, const TensorF& t, bool) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(t.data());
        out.insert(out.end(), p, p + t.size() * sizeof(float));
    });
    return out;
}

Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
    ByteReader r(bytes.data(), bytes.size());
    char magic[4];
    r.get_bytes(magic, 4, "magic");
    if (std::memcmp(magic, kMagic, 4) != 0)
        throw FormatError(FormatErrorKind::kBadMagic, "checkpoint: bad magic");
    const auto version = r.get<std::uint32_t>("version");
    if (version != kVersion)
        throw FormatError(FormatErrorKind::kBadVersion,
                          "checkpoint: unsupported version " + std::to_string(version));
    const auto hlen = r.get<std::uint64_t>("header length");
    if (hlen > r.remaining())
        throw FormatError(FormatErrorKind::kTruncated, "checkpoint: header length exceeds file");
    std::string htext(hlen, '\0');
    r.get_bytes(htext.data(), hlen, "header");

    Json header;
    try {
        header = Json::parse(htext);
    } catch (const Json::parse_error& e) {
        throw FormatError(FormatErrorKind::kHeader,
                          std::string("checkpoint: header is not valid json: ") + e.what());
    }

    Checkpoint ckpt;
    try {
        ckpt.config = run_config_from_json(header.at("config").dump());
        ckpt.step = header.at("step").get<long>();
        if (!header.at("tensors").is_array())
            throw FormatError(FormatErrorKind::kHeader, "checkpoint: tensor table is not an array");
    } catch (const Json::exception& e) {
        throw FormatError(FormatErrorKind::kHeader,
                          std::string("checkpoint: malformed header: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw FormatError(FormatErrorKind::kHeader,
                          std::string("checkpoint: embedded config rejected: ") + e.what());
    }

    // The tensor table must tile the payload exactly: offsets in file order,
    // no gaps, no overlap, and the last entry ends at the payload boundary.
    const std::size_t payload = r.remaining();
    std::uint64_t expect_offset = 0;
    for (const auto& jt : header.at("tensors")) {
        CheckpointTensor ct;
        try {
            ct.name = jt.at("name").get<std::string>();
            ct.shape = jt.at("shape").get<Shape>();
            ct.frozen = jt.at("frozen").get<bool>();
            if (jt.at("dtype").get<std::string>() != "f32")
                throw FormatError(FormatErrorKind::kHeader,
                                  "checkpoint: unsupported dtype for '" + ct.name + "'");
            if (jt.at("offset").get<std::uint64_t>() != expect_offset)
                throw FormatError(FormatErrorKind::kHeader,
                                  "checkpoint: offset gap or overlap at '" + ct.name + "'");
        } catch (const Json::exception& e) {
            throw FormatError(FormatErrorKind::kHeader,
                              std::string("checkpoint: malformed tensor entry: ") + e.what());
        }
        bool shape_ok = !ct.shape.empty();
        for (int d : ct.shape) shape_ok = shape_ok && d >= 1;
        if (!shape_ok)
            throw FormatError(FormatErrorKind::kHeader, "checkpoint: bad shape for '" + ct.name + "'");
        std::vector<float> values(shape_numel(ct.shape));
        const std::size_t nbytes = values.size() * sizeof(float);
        if (expect_offset + nbytes > payload)
            throw FormatError(FormatErrorKind::kTruncated,
                              "checkpoint: payload truncated at '" + ct.name + "'");
        std::memcpy(values.data(), r.cursor() + expect_offset, nbytes);
        expect_offset += nbytes;
        ct.tensor = TensorF::from_data(ct.shape, std::move(values));
        ckpt.tensors.push_back(std::move(ct));
    }
    if (expect_offset != payload)
        throw FormatError(FormatErrorKind::kSize, "checkpoint: trailing bytes after last tensor");
    return ckpt;
}

void save_checkpoint(const std::string& path, const ParamSetT<float>& params,
                     const RunConfig& config, long step) {
    write_file(path, serialize_checkpoint(params, config, step));
}

Checkpoint load_checkpoint(const std::string& path) {
    return deserialize_checkpoint(read_file(path));
}

void restore_params(ParamSetT<float>& dst, const Checkpoint& ckpt) {
    std::size_t matched = 0;
    for (const auto& ct : ckpt.tensors) {
        if (!dst.contains(ct.name))
            throw std::invalid_argument("checkpoint: destination has no parameter '" + ct.name + "'");
        TensorF& t = dst.at(ct.name);
        if (t.shape() != ct.shape)
            throw std::invalid_argument("checkpoint: shape mismatch for '" + ct.name + "': " +
                                        shape_str(ct.shape) + " vs " + shape_str(t.shape()));
        std::memcpy(t.data(), ct.tensor.data(), t.size() * sizeof(float));
        ++matched;
    }
    if (matched != dst.entry_count())
        throw std::invalid_argument("checkpoint: destination has " +
                                    std::to_string(dst.entry_count()) + " parameters, file has " +
                                    std::to_string(matched));
}

ModelT<float> model_from_checkpoint(const Checkpoint& ckpt) {
    ModelT<float> m = build_model<float>(ckpt.config.model, ckpt.config.train.seed);
    restore_params(m.params, ckpt);
    return m;
}

}  // namespace dedit
