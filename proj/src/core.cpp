#include "fedwsidd/core.hpp"

#include <algorithm>
#include <set>
#include <unordered_map>

namespace fedwsidd {

const char* errc_name(Errc code) {
  switch (code) {
    case Errc::ConfigInvalid: return "ConfigInvalid";
    case Errc::DegenerateTissue: return "DegenerateTissue";
    case Errc::MissingWeights: return "MissingWeights";
    case Errc::UnsupportedExtractor: return "UnsupportedExtractor";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::EmptyBag: return "EmptyBag";
    case Errc::EmptyDataset: return "EmptyDataset";
    case Errc::InsufficientRealPatches: return "InsufficientRealPatches";
    case Errc::MissingClass: return "MissingClass";
    case Errc::LengthMismatch: return "LengthMismatch";
    case Errc::TooFewSamples: return "TooFewSamples";
    case Errc::InconsistentCentres: return "InconsistentCentres";
    case Errc::MissingFile: return "MissingFile";
    case Errc::UndecodableImage: return "UndecodableImage";
    case Errc::ManifestSchema: return "ManifestSchema";
    case Errc::ChecksumMismatch: return "ChecksumMismatch";
    case Errc::BadMagic: return "BadMagic";
    case Errc::TruncatedFile: return "TruncatedFile";
    case Errc::SeedMismatch: return "SeedMismatch";
    case Errc::Io: return "Io";
  }
  return "Unknown";
}

PatchTensor PatchTensor::from_double(int c, int h, int w, const std::vector<double>& values, bool clamp) {
  if (values.size() != static_cast<std::size_t>(c) * h * w) {
    throw Error(Errc::ShapeMismatch, "pixel buffer does not match patch shape");
  }
  PatchTensor out(c, h, w);
  for (std::size_t i = 0; i < values.size(); ++i) {
    double v = values[i];
    if (clamp) v = std::clamp(v, 0.0, 1.0);
    out.data[i] = static_cast<float>(v);
  }
  return out;
}

int SyntheticSet::num_classes() const {
  int n = 0;
  for (const auto& s : slides) n = std::max(n, s.label.index + 1);
  return n;
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t mix_seed(std::uint64_t seed, std::string_view label) {
  return splitmix64(splitmix64(seed) ^ fnv1a(label));
}

}  // namespace

RngStream::RngStream(std::uint64_t seed, std::string label)
    : seed_(seed), label_(std::move(label)), engine_(mix_seed(seed, label_)) {}

RngStream RngStream::child(std::string_view suffix) const {
  return RngStream(seed_, label_ + "/" + std::string(suffix));
}

RngStream derive_stream(std::uint64_t root_seed, std::string_view label) {
  if (label.empty()) throw Error(Errc::ConfigInvalid, "stream label must be nonempty");
  return RngStream(root_seed, std::string(label));
}

std::vector<std::string> validate_client_dataset(const ClientDataset& dataset) {
  std::vector<std::string> violations;
  if (dataset.num_classes < 1) {
    violations.push_back("centre " + dataset.centre_id + ": num_classes must be >= 1");
  }

  auto check_split = [&](const std::vector<Slide>& slides, const char* split, std::set<std::string>& ids) {
    for (const auto& slide : slides) {
      if (slide.label.index < 0 || slide.label.index >= dataset.num_classes) {
        violations.push_back("slide " + slide.id + " (" + split + "): label index " +
                             std::to_string(slide.label.index) + " outside [0, " +
                             std::to_string(dataset.num_classes) + ")");
      }
      if (slide.patches.empty()) {
        violations.push_back("slide " + slide.id + " (" + split + "): no patches");
      } else {
        const auto& first = slide.patches.front();
        for (const auto& p : slide.patches) {
          if (!p.same_shape(first) || p.data.size() != p.size() || p.size() == 0) {
            violations.push_back("slide " + slide.id + " (" + split + "): inconsistent patch shapes");
            break;
          }
        }
      }
      if (!ids.insert(slide.id).second) {
        violations.push_back("slide " + slide.id + " (" + split + "): duplicate slide id");
      }
    }
  };

  std::set<std::string> train_ids;
  std::set<std::string> test_ids;
  check_split(dataset.train_slides, "train", train_ids);
  check_split(dataset.test_slides, "test", test_ids);
  for (const auto& id : train_ids) {
    if (test_ids.count(id)) violations.push_back("split overlap: slide " + id + " appears in train and test");
  }
  return violations;
}

}  // namespace fedwsidd
