#include "dedit/dataset.hpp"

#include <algorithm>
#include <cstring>
#include <set>
#include <sstream>
#include <stdexcept>

#include "dedit/io_util.hpp"

namespace dedit {

namespace {

constexpr std::array<std::array<float, 3>, vocab::kColorCount> kPalette = {{
    {1, -1, -1},   // red
    {-1, 1, -1},   // green
    {-1, -1, 1},   // blue
    {1, 1, -1},    // yellow
    {1, -1, 1},    // magenta
    {-1, 1, 1},    // cyan
}};

constexpr int kSquareHalf = 2;  // 4x4 block, center-relative rows/cols -2..+1
constexpr int kDiscRadius = 2;

std::uint16_t color_token(int palette_index) {
    return static_cast<std::uint16_t>(vocab::kRed + palette_index);
}
int token_color(std::uint16_t t) {
    if (t < vocab::kRed || t > vocab::kCyan) throw std::invalid_argument("not a color token");
    return t - vocab::kRed;
}

std::uint16_t shape_token(ShapeKind s) {
    return s == ShapeKind::kSquare ? vocab::kSquare : vocab::kDisc;
}
std::uint16_t anchor_token(int anchor) {
    return static_cast<std::uint16_t>(vocab::kTopLeft + anchor);
}

void paint(TensorF& img, const SceneObject& obj) {
    const auto [cr, cc] = std::pair(kAnchors[obj.anchor][0], kAnchors[obj.anchor][1]);
    const auto rgb = palette_color(obj.color);
    auto set = [&](int r, int c) {
        for (int ch = 0; ch < kImageChannels; ++ch)
            img.data()[(ch * kImageSize + r) * kImageSize + c] = rgb[ch];
    };
    if (obj.shape == ShapeKind::kSquare) {
        for (int r = cr - kSquareHalf; r < cr + kSquareHalf; ++r)
            for (int c = cc - kSquareHalf; c < cc + kSquareHalf; ++c) set(r, c);
    } else {
        for (int dr = -kDiscRadius; dr <= kDiscRadius; ++dr)
            for (int dc = -kDiscRadius; dc <= kDiscRadius; ++dc)
                if (dr * dr + dc * dc <= kDiscRadius * kDiscRadius) set(cr + dr, cc + dc);
    }
}

}  // namespace

const char* vocab::name(std::uint16_t token) {
    static constexpr const char* kNames[] = {
        "[PAD]",     "[NULL]",       "[BOS]",        "[EOS]",         "red",     "green",
        "blue",      "yellow",       "magenta",      "cyan",          "square",  "disc",
        "top-left",  "top-right",    "bottom-left",  "bottom-right",  "center",  "background",
        "recolor",   "move",         "add",          "remove",        "repaint",
    };
    if (token >= kSize) throw std::out_of_range("token id out of vocabulary");
    return kNames[token];
}

const char* edit_kind_name(EditKind k) {
    switch (k) {
        case EditKind::kRecolor: return "recolor";
        case EditKind::kMove: return "move";
        case EditKind::kAdd: return "add";
        case EditKind::kRemove: return "remove";
        case EditKind::kBackground: return "background";
    }
    throw std::invalid_argument("unknown edit kind");
}

std::array<float, 3> palette_color(int index) {
    if (index < 0 || index >= vocab::kColorCount) throw std::out_of_range("palette index out of range");
    return kPalette[index];
}

void Scene::validate() const {
    if (background < 0 || background >= vocab::kColorCount)
        throw std::invalid_argument("scene: background palette index out of range");
    if (objects.size() > kMaxObjects)
        throw std::invalid_argument("scene: more than " + std::to_string(kMaxObjects) + " objects");
    std::set<int> anchors;
    for (const auto& o : objects) {
        if (o.color < 0 || o.color >= vocab::kColorCount)
            throw std::invalid_argument("scene: object palette index out of range");
        if (o.anchor < 0 || o.anchor >= vocab::kAnchorCount)
            throw std::invalid_argument("scene: anchor index out of range");
        if (!anchors.insert(o.anchor).second)
            throw std::invalid_argument("scene: two objects share an anchor");
    }
}

TensorF render(const Scene& scene) {
    scene.validate();
    TensorF img = TensorF::zeros({kImageChannels, kImageSize, kImageSize});
    const auto bg = palette_color(scene.background);
    for (int ch = 0; ch < kImageChannels; ++ch)
        for (int i = 0; i < kImageSize * kImageSize; ++i)
            img.data()[ch * kImageSize * kImageSize + i] = bg[ch];
    for (const auto& o : scene.objects) paint(img, o);
    return img;
}

TokenSeq describe(const Scene& scene) {
    scene.validate();
    TokenSeq out{};
    std::size_t i = 0;
    out[i++] = vocab::kBos;
    out[i++] = color_token(scene.background);
    out[i++] = vocab::kBackground;
    for (const auto& o : scene.objects) {
        out[i++] = color_token(o.color);
        out[i++] = shape_token(o.shape);
        out[i++] = anchor_token(o.anchor);
    }
    out[i++] = vocab::kEos;
    return out;  // remaining slots stay [PAD]
}

Scene parse_description(const TokenSeq& tokens) {
    std::size_t i = 0;
    auto expect = [&](std::uint16_t t, const char* what) {
        if (i >= tokens.size() || tokens[i] != t)
            throw std::invalid_argument(std::string("description: expected ") + what);
        ++i;
    };
    expect(vocab::kBos, "[BOS]");
    Scene s;
    if (i >= tokens.size()) throw std::invalid_argument("description: truncated");
    s.background = token_color(tokens[i++]);
    expect(vocab::kBackground, "'background'");
    while (i < tokens.size() && tokens[i] != vocab::kEos) {
        SceneObject o;
        o.color = token_color(tokens[i++]);
        if (i >= tokens.size() || (tokens[i] != vocab::kSquare && tokens[i] != vocab::kDisc))
            throw std::invalid_argument("description: expected shape token");
        o.shape = tokens[i++] == vocab::kSquare ? ShapeKind::kSquare : ShapeKind::kDisc;
        if (i >= tokens.size() || tokens[i] < vocab::kTopLeft || tokens[i] > vocab::kCenter)
            throw std::invalid_argument("description: expected position token");
        o.anchor = tokens[i++] - vocab::kTopLeft;
        s.objects.push_back(o);
    }
    expect(vocab::kEos, "[EOS]");
    for (; i < tokens.size(); ++i)
        if (tokens[i] != vocab::kPad) throw std::invalid_argument("description: garbage after [EOS]");
    s.validate();
    return s;
}

TokenSeq instruct(const Scene& original, const Scene& target, EditKind kind) {
    TokenSeq out{};
    std::size_t i = 0;
    out[i++] = vocab::kBos;
    switch (kind) {
        case EditKind::kRecolor: {
            // the object that changed color, by original appearance
            for (std::size_t k = 0; k < original.objects.size(); ++k) {
                const auto& a = original.objects[k];
                const auto& b = target.objects[k];
                if (a.color != b.color) {
                    out[i++] = vocab::kRecolor;
                    out[i++] = color_token(a.color);
                    out[i++] = shape_token(a.shape);
                    out[i++] = anchor_token(a.anchor);
                    out[i++] = color_token(b.color);
                    break;
                }
            }
            break;
        }
        case EditKind::kMove: {
            for (std::size_t k = 0; k < original.objects.size(); ++k) {
                const auto& a = original.objects[k];
                const auto& b = target.objects[k];
                if (a.anchor != b.anchor) {
                    out[i++] = vocab::kMove;
                    out[i++] = color_token(a.color);
                    out[i++] = shape_token(a.shape);
                    out[i++] = anchor_token(a.anchor);
                    out[i++] = anchor_token(b.anchor);
                    break;
                }
            }
            break;
        }
        case EditKind::kAdd: {
            const auto& o = target.objects.back();
            out[i++] = vocab::kAdd;
            out[i++] = color_token(o.color);
            out[i++] = shape_token(o.shape);
            out[i++] = anchor_token(o.anchor);
            break;
        }
        case EditKind::kRemove: {
            std::set<int> kept;
            for (const auto& o : target.objects) kept.insert(o.anchor);
            for (const auto& o : original.objects)
                if (!kept.count(o.anchor)) {
                    out[i++] = vocab::kRemove;
                    out[i++] = color_token(o.color);
                    out[i++] = shape_token(o.shape);
                    out[i++] = anchor_token(o.anchor);
                    break;
                }
            break;
        }
        case EditKind::kBackground: {
            out[i++] = vocab::kRepaint;
            out[i++] = color_token(target.background);
            break;
        }
    }
    if (i < 2) throw std::logic_error("instruct: scenes do not exhibit the claimed edit");
    out[i++] = vocab::kEos;
    return out;
}

TokenSeq null_text() {
    TokenSeq out{};
    out[0] = vocab::kNull;
    return out;
}

std::string tokens_to_string(const TokenSeq& tokens) {
    std::ostringstream os;
    bool first = true;
    for (std::uint16_t t : tokens) {
        if (t == vocab::kPad) continue;
        os << (first ? "" : " ") << vocab::name(t);
        first = false;
    }
    return os.str();
}

namespace {

int draw_color_except(Rng& rng, const std::set<int>& banned) {
    std::vector<int> pool;
    for (int c = 0; c < vocab::kColorCount; ++c)
        if (!banned.count(c)) pool.push_back(c);
    return pool[rng.uniform_int(pool.size())];
}

Scene gen_scene(Rng& rng, int object_count) {
    Scene s;
    s.background = static_cast<int>(rng.uniform_int(vocab::kColorCount));
    std::array<int, vocab::kAnchorCount> anchors{0, 1, 2, 3, 4};
    // Fisher-Yates prefix shuffle to pick distinct anchors
    for (int k = 0; k < object_count; ++k) {
        const int j = k + static_cast<int>(rng.uniform_int(vocab::kAnchorCount - k));
        std::swap(anchors[k], anchors[j]);
        SceneObject o;
        o.anchor = anchors[k];
        o.shape = rng.bernoulli(0.5) ? ShapeKind::kDisc : ShapeKind::kSquare;
        o.color = draw_color_except(rng, {s.background});
        s.objects.push_back(o);
    }
    return s;
}

}  // namespace

EditPair gen_pair(Rng rng) {
    EditPair pair;
    pair.kind = static_cast<EditKind>(rng.uniform_int(kEditKindCount));

    // object count compatible with the edit kind
    int n = 0;
    switch (pair.kind) {
        case EditKind::kAdd: n = static_cast<int>(rng.uniform_int(kMaxObjects)); break;         // 0..2
        case EditKind::kBackground: n = static_cast<int>(rng.uniform_int(kMaxObjects + 1)); break;  // 0..3
        default: n = 1 + static_cast<int>(rng.uniform_int(kMaxObjects)); break;                 // 1..3
    }
    pair.original = gen_scene(rng, n);
    pair.target = pair.original;

    switch (pair.kind) {
        case EditKind::kRecolor: {
            const std::size_t pick = rng.uniform_int(pair.target.objects.size());
            auto& o = pair.target.objects[pick];
            o.color = draw_color_except(rng, {o.color, pair.target.background});
            break;
        }
        case EditKind::kMove: {
            const std::size_t pick = rng.uniform_int(pair.target.objects.size());
            std::set<int> used;
            for (const auto& o : pair.target.objects) used.insert(o.anchor);
            std::vector<int> free_anchors;
            for (int a = 0; a < vocab::kAnchorCount; ++a)
                if (!used.count(a)) free_anchors.push_back(a);
            pair.target.objects[pick].anchor = free_anchors[rng.uniform_int(free_anchors.size())];
            break;
        }
        case EditKind::kAdd: {
            std::set<int> used;
            for (const auto& o : pair.target.objects) used.insert(o.anchor);
            std::vector<int> free_anchors;
            for (int a = 0; a < vocab::kAnchorCount; ++a)
                if (!used.count(a)) free_anchors.push_back(a);
            SceneObject o;
            o.anchor = free_anchors[rng.uniform_int(free_anchors.size())];
            o.shape = rng.bernoulli(0.5) ? ShapeKind::kDisc : ShapeKind::kSquare;
            o.color = draw_color_except(rng, {pair.target.background});
            pair.target.objects.push_back(o);
            break;
        }
        case EditKind::kRemove: {
            const std::size_t pick = rng.uniform_int(pair.target.objects.size());
            pair.target.objects.erase(pair.target.objects.begin() + pick);
            break;
        }
        case EditKind::kBackground: {
            std::set<int> banned{pair.target.background};
            for (const auto& o : pair.target.objects) banned.insert(o.color);
            pair.target.background = draw_color_except(rng, banned);
            break;
        }
    }

    pair.original_image = render(pair.original);
    pair.target_image = render(pair.target);
    for (int i = 0; i < kImageSize * kImageSize; ++i) {
        bool differs = false;
        for (int ch = 0; ch < kImageChannels; ++ch)
            differs = differs || pair.original_image.values()[ch * kImageSize * kImageSize + i] !=
                                     pair.target_image.values()[ch * kImageSize * kImageSize + i];
        pair.mask[i] = differs ? 1 : 0;
    }
    pair.description = describe(pair.target);
    pair.instruction = instruct(pair.original, pair.target, pair.kind);
    return pair;
}

std::vector<EditPair> gen_dataset(std::uint64_t seed, int count) {
    if (count < 0) throw std::invalid_argument("gen_dataset: negative count");
    Rng root = Rng(seed).split("dataset");
    std::vector<EditPair> out;
    out.reserve(count);
    for (int i = 0; i < count; ++i) out.push_back(gen_pair(root.split(static_cast<std::uint64_t>(i))));
    return out;
}

// ---- serialization --------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'D', 'E', 'D', 'S'};
constexpr std::uint32_t kVersion = 1;

void put_image(std::vector<std::uint8_t>& out, const TensorF& img) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(img.data());
    out.insert(out.end(), p, p + img.size() * sizeof(float));
}

}  // namespace

std::vector<std::uint8_t> serialize_dataset(const std::vector<EditPair>& pairs) {
    std::vector<std::uint8_t> out;
    out.reserve(12 + pairs.size() * kDatasetRecordBytes + 4);
    out.insert(out.end(), kMagic, kMagic + 4);
    put_le<std::uint32_t>(out, kVersion);
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(pairs.size()));
    const std::size_t payload_start = out.size();
    for (const auto& p : pairs) {
        put_image(out, p.original_image);
        put_image(out, p.target_image);
        out.insert(out.end(), p.mask.begin(), p.mask.end());
        for (std::uint16_t t : p.description) put_le<std::uint16_t>(out, t);
        for (std::uint16_t t : p.instruction) put_le<std::uint16_t>(out, t);
        out.push_back(static_cast<std::uint8_t>(p.kind));
    }
    put_le<std::uint32_t>(out, crc32(out.data() + payload_start, out.size() - payload_start));
    return out;
}

std::vector<EditPair> deserialize_dataset(const std::vector<std::uint8_t>& bytes) {
    ByteReader r(bytes.data(), bytes.size());
    char magic[4];
    r.get_bytes(magic, 4, "magic");
    if (std::memcmp(magic, kMagic, 4) != 0)
        throw FormatError(FormatErrorKind::kBadMagic, "dataset: bad magic, not a DEDS file");
    const auto version = r.get<std::uint32_t>("version");
    if (version != kVersion)
        throw FormatError(FormatErrorKind::kBadVersion,
                          "dataset: unsupported version " + std::to_string(version));
    const auto count = r.get<std::uint32_t>("record count");
    const std::size_t expected = 12 + static_cast<std::size_t>(count) * kDatasetRecordBytes + 4;
    if (bytes.size() < expected)
        throw FormatError(FormatErrorKind::kTruncated, "dataset: file shorter than declared contents");
    if (bytes.size() > expected)
        throw FormatError(FormatErrorKind::kSize, "dataset: trailing bytes after checksum");
    const std::uint32_t actual_crc =
        crc32(bytes.data() + 12, static_cast<std::size_t>(count) * kDatasetRecordBytes);

    std::vector<EditPair> pairs(count);
    for (auto& p : pairs) {
        std::vector<float> buf(kImageChannels * kImageSize * kImageSize);
        r.get_bytes(buf.data(), buf.size() * sizeof(float), "original image");
        p.original_image = TensorF::from_data({kImageChannels, kImageSize, kImageSize}, buf);
        r.get_bytes(buf.data(), buf.size() * sizeof(float), "target image");
        p.target_image = TensorF::from_data({kImageChannels, kImageSize, kImageSize}, std::move(buf));
        r.get_bytes(p.mask.data(), p.mask.size(), "mask");
        for (auto& t : p.description) t = r.get<std::uint16_t>("description token");
        for (auto& t : p.instruction) t = r.get<std::uint16_t>("instruction token");
        const auto kind = r.get<std::uint8_t>("edit kind");
        if (kind >= kEditKindCount)
            throw FormatError(FormatErrorKind::kHeader, "dataset: invalid edit kind byte");
        p.kind = static_cast<EditKind>(kind);
    }
    const auto stored_crc = r.get<std::uint32_t>("checksum");
    if (stored_crc != actual_crc)
        throw FormatError(FormatErrorKind::kChecksum, "dataset: payload checksum mismatch");
    return pairs;
}

void save_dataset(const std::string& path, const std::vector<EditPair>& pairs) {
    write_file(path, serialize_dataset(pairs));
}

std::vector<EditPair> load_dataset(const std::string& path) {
    return deserialize_dataset(read_file(path));
}

}  // namespace dedit
