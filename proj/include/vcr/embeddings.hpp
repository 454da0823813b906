#pragma once

#include <cmath>
#include <compare>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vcr/geometry.hpp"
#include "vcr/types.hpp"

namespace vcr {

inline constexpr double kUnitNormTolerance = 1e-4;

template <typename Derived>
bool is_unit_norm(const Eigen::MatrixBase<Derived>& v, double tol = kUnitNormTolerance) {
  if (!v.allFinite()) return false;
  return std::abs(v.template cast<double>().norm() - 1.0) <= tol;
}

// L2-normalized copy in the input scalar; the norm itself is accumulated in f64.
template <typename Derived>
Vector<typename Derived::Scalar> normalized(const Eigen::MatrixBase<Derived>& v) {
  using Scalar = typename Derived::Scalar;
  const double norm = v.template cast<double>().norm();
  if (!(norm > 0.0) || !std::isfinite(norm)) throw InvalidArgument("cannot normalize a zero or non-finite vector");
  return (v.template cast<double>() / norm).template cast<Scalar>();
}

// Cosine of unit vectors, computed as a dot product in f64.
template <typename A, typename B>
double cosine(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  return a.template cast<double>().dot(b.template cast<double>());
}

// Which view of an image a feature row describes.
struct ViewKey {
  enum class Kind : std::uint8_t { Global, Crop, Refined };

  Kind kind = Kind::Global;
  CropRect rect{};
  bool flipped = false;

  static ViewKey global() { return {}; }
  static ViewKey refined() { return {Kind::Refined, {}, false}; }
  static ViewKey crop(const CropRect& r, bool flipped = false) { return {Kind::Crop, r, flipped}; }

  // A non-flipped crop covering the whole image is the global view.
  ViewKey canonical(int width, int height) const {
    if (kind == Kind::Crop && !flipped && rect.covers(width, height)) return global();
    return *this;
  }

  std::string str() const;

  friend bool operator==(const ViewKey&, const ViewKey&) = default;
  friend auto operator<=>(const ViewKey&, const ViewKey&) = default;
};

// Class text embeddings with the CLIP temperature.
class TextClassifier {
 public:
  TextClassifier(std::vector<std::string> class_names, FeatureMatrix weights, double tau);

  const std::vector<std::string>& class_names() const noexcept { return names_; }
  const FeatureMatrix& weights() const noexcept { return weights_; }
  double tau() const noexcept { return tau_; }
  Index num_classes() const noexcept { return weights_.rows(); }
  Index dim() const noexcept { return weights_.cols(); }

 private:
  std::vector<std::string> names_;
  FeatureMatrix weights_;
  double tau_;
};

// Validates names (>= 2, unique), tau > 0 and row shapes; rows are re-normalized.
TextClassifier build_text_classifier(std::vector<std::string> class_names, const FeatureMatrix& weights,
                                     double tau);

struct ImageInfo {
  std::string id;
  int width = 0;
  int height = 0;
};

struct StoreEntry {
  std::string image;
  ViewKey view;
  Index row = 0;
  nlohmann::json extra = nlohmann::json::object();  // e.g. "selection" for refined rows
};

class EmbeddingStore {
 public:
  EmbeddingStore() = default;
  EmbeddingStore(FeatureMatrix rows, std::vector<ImageInfo> images, std::vector<StoreEntry> entries,
                 nlohmann::json meta = nlohmann::json::object());

  Index dim() const noexcept { return rows_.cols(); }
  Index count() const noexcept { return rows_.rows(); }
  const FeatureMatrix& rows() const noexcept { return rows_; }
  const std::vector<ImageInfo>& images() const noexcept { return images_; }
  const std::vector<StoreEntry>& entries() const noexcept { return entries_; }
  // Top-level manifest keys other than "images" and "rows".
  const nlohmann::json& meta() const noexcept { return meta_; }

  const ImageInfo* find_image(const std::string& id) const;
  std::optional<Index> find(const std::string& image, const ViewKey& view) const;

  // Checks indices, key uniqueness, image references and unit norms; throws ValidationError.
  void validate() const;

  class Builder {
   public:
    explicit Builder(Index dim) : dim_(dim) {}
    Builder& add_image(ImageInfo info);
    Builder& add_row(const std::string& image, const ViewKey& view, const FeatureVector& v,
                     nlohmann::json extra = nlohmann::json::object());
    Builder& set_meta(const std::string& key, nlohmann::json value);
    EmbeddingStore build() &&;

   private:
    Index dim_;
    std::vector<ImageInfo> images_;
    std::vector<StoreEntry> entries_;
    std::vector<FeatureVector> rows_;
    nlohmann::json meta_ = nlohmann::json::object();
  };

 private:
  FeatureMatrix rows_;
  std::vector<ImageInfo> images_;
  std::vector<StoreEntry> entries_;
  nlohmann::json meta_ = nlohmann::json::object();
  std::map<std::string, std::size_t> image_index_;
  std::map<std::pair<std::string, ViewKey>, Index> row_index_;
};

// ---- .vcre binary format -----------------------------------------------------------------
//
//   offset  size  field
//   0       4     magic "VCRE" (56 43 52 45)
//   4       4     u32 version = 1
//   8       4     u32 dim
//   12      8     u64 row_count
//   20      ...   row_count * dim f32, row-major
//
// All integers and floats little-endian. The sidecar manifest shares the basename with a
// ".json" extension.

inline constexpr std::uint32_t kVcreVersion = 1;
inline constexpr std::size_t kVcreHeaderSize = 20;

std::vector<std::uint8_t> encode_vcre(const FeatureMatrix& rows);
// Throws FormatError naming the offending byte offset.
FeatureMatrix decode_vcre(const std::vector<std::uint8_t>& bytes);

FeatureMatrix read_vcre(const std::filesystem::path& path);
void write_vcre(const FeatureMatrix& rows, const std::filesystem::path& path);

std::filesystem::path sidecar_path(const std::filesystem::path& vcre_path);

// Unit-norm check over all rows; throws ValidationError listing offending rows.
void require_unit_rows(const FeatureMatrix& rows, const std::string& what);

nlohmann::json store_manifest(const EmbeddingStore& store);
EmbeddingStore store_from_manifest(FeatureMatrix rows, const nlohmann::json& manifest);

EmbeddingStore load_embedding_file(const std::filesystem::path& path);
void write_embedding_file(const EmbeddingStore& store, const std::filesystem::path& path);

TextClassifier load_text_classifier(const std::filesystem::path& path);
void write_text_classifier(const TextClassifier& clf, const std::filesystem::path& path);

// Exporter output: a headerful .vcre whose rows follow a crop manifest produced by `decompose`.
EmbeddingStore load_exported_embeddings(const std::filesystem::path& vcre_path,
                                        const std::filesystem::path& crop_manifest_path);

nlohmann::json read_json_file(const std::filesystem::path& path);
// Writes to a temporary sibling and renames over the target.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
void write_json_file(const std::filesystem::path& path, const nlohmann::json& j);

nlohmann::json view_to_json(const ViewKey& view);
ViewKey view_from_json(const nlohmann::json& crop, bool flipped);

// ---- encoder backends ---------------------------------------------------------------------

class EncoderBackend {
 public:
  virtual ~EncoderBackend() = default;
  virtual Index dim() const = 0;
  // Throws NotFound for unknown ids.
  virtual ImageInfo image_info(const std::string& image_id) const = 0;
  virtual FeatureVector encode(const std::string& image_id, const ViewKey& view) const = 0;
};

// Validates the crop against the image before delegating to the backend.
FeatureVector encode_view(const EncoderBackend& backend, const std::string& image_id, const ViewKey& view);

// Serves rows from an EmbeddingStore; absent keys raise MissingEmbedding.
class StoreBackend final : public EncoderBackend {
 public:
  explicit StoreBackend(std::shared_ptr<const EmbeddingStore> store);

  Index dim() const override { return store_->dim(); }
  ImageInfo image_info(const std::string& image_id) const override;
  FeatureVector encode(const std::string& image_id, const ViewKey& view) const override;
  const EmbeddingStore& store() const noexcept { return *store_; }

 private:
  std::shared_ptr<const EmbeddingStore> store_;
};

}  // namespace vcr
