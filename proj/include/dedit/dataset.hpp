#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "dedit/rng.hpp"
#include "dedit/tensor.hpp"

// Procedural scenes of colored squares and discs on a colored background,
// paired across an edit. Each pair carries the exact change mask plus two
// token encodings of the edit: a description of the full target scene
// (sufficient to reconstruct it) and an imperative instruction (which names
// the change but not the rest of the scene).

namespace dedit {

namespace vocab {

enum Token : std::uint16_t {
    kPad = 0,
    kNull = 1,
    kBos = 2,
    kEos = 3,
    kRed = 4,
    kGreen = 5,
    kBlue = 6,
    kYellow = 7,
    kMagenta = 8,
    kCyan = 9,
    kSquare = 10,
    kDisc = 11,
    kTopLeft = 12,
    kTopRight = 13,
    kBottomLeft = 14,
    kBottomRight = 15,
    kCenter = 16,
    kBackground = 17,
    kRecolor = 18,
    kMove = 19,
    kAdd = 20,
    kRemove = 21,
    kRepaint = 22,
};

constexpr int kSize = 23;
constexpr int kColorCount = 6;
constexpr int kAnchorCount = 5;

const char* name(std::uint16_t token);

}  // namespace vocab

constexpr int kImageSize = 16;
constexpr int kImageChannels = 3;
constexpr int kMaxTextLen = 16;
constexpr int kMaxObjects = 3;

using TokenSeq = std::array<std::uint16_t, kMaxTextLen>;

enum class ShapeKind : std::uint8_t { kSquare = 0, kDisc = 1 };

enum class EditKind : std::uint8_t {
    kRecolor = 0,
    kMove = 1,
    kAdd = 2,
    kRemove = 3,
    kBackground = 4,
};
constexpr int kEditKindCount = 5;
const char* edit_kind_name(EditKind k);

// Anchor centers (row, col) for the five placement slots: four corners and
// the center. Spacing guarantees shapes at distinct anchors never overlap.
constexpr std::array<std::array<int, 2>, vocab::kAnchorCount> kAnchors = {{
    {3, 3},    // top-left
    {3, 12},   // top-right
    {12, 3},   // bottom-left
    {12, 12},  // bottom-right
    {8, 8},    // center
}};

struct SceneObject {
    ShapeKind shape = ShapeKind::kSquare;
    int color = 0;   // palette index, 0..5
    int anchor = 0;  // index into kAnchors
};

struct Scene {
    int background = 0;  // palette index
    std::vector<SceneObject> objects;

    // Enforces: at most kMaxObjects, valid palette/anchor ids, no two objects
    // on the same anchor. Throws std::invalid_argument on violation.
    void validate() const;
};

struct EditPair {
    Scene original;
    Scene target;
    TensorF original_image;  // [3,16,16], values in [-1,1]
    TensorF target_image;
    std::array<std::uint8_t, kImageSize * kImageSize> mask{};  // 1 where renders differ
    EditKind kind = EditKind::kRecolor;
    TokenSeq description{};  // full target scene, invertible
    TokenSeq instruction{};  // imperative form of the change
};

// Palette index -> RGB in [-1,1].
std::array<float, 3> palette_color(int index);

TensorF render(const Scene& scene);

TokenSeq describe(const Scene& scene);
Scene parse_description(const TokenSeq& tokens);
TokenSeq instruct(const Scene& original, const Scene& target, EditKind kind);

TokenSeq null_text();

std::string tokens_to_string(const TokenSeq& tokens);

EditPair gen_pair(Rng rng);
std::vector<EditPair> gen_dataset(std::uint64_t seed, int count);

// "DEDS" v1 container: fixed-size records, trailing CRC-32 over the record
// payload. Loaders raise FormatError with a distinct kind per failure mode.
void save_dataset(const std::string& path, const std::vector<EditPair>& pairs);
std::vector<EditPair> load_dataset(const std::string& path);
std::vector<std::uint8_t> serialize_dataset(const std::vector<EditPair>& pairs);
std::vector<EditPair> deserialize_dataset(const std::vector<std::uint8_t>& bytes);

constexpr std::size_t kDatasetRecordBytes =
    2 * kImageChannels * kImageSize * kImageSize * sizeof(float)  // two images
    + kImageSize * kImageSize                                     // mask
    + 2 * kMaxTextLen * sizeof(std::uint16_t)                     // two token strings
    + 1;                                                          // edit kind

}  // namespace dedit
