#include "vcr/embeddings.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>
#include <unistd.h>

namespace vcr {

namespace fs = std::filesystem;
using nlohmann::json;

std::string ViewKey::str() const {
  switch (kind) {
    case Kind::Global:
      return "global";
    case Kind::Refined:
      return "refined";
    case Kind::Crop:
      break;
  }
  std::ostringstream os;
  os << "[" << rect.x << "," << rect.y << "," << rect.w << "," << rect.h << "]";
  if (flipped) os << "+flip";
  return os.str();
}

// ---- TextClassifier -----------------------------------------------------------------------

TextClassifier::TextClassifier(std::vector<std::string> class_names, FeatureMatrix weights, double tau)
    : names_(std::move(class_names)), weights_(std::move(weights)), tau_(tau) {}

TextClassifier build_text_classifier(std::vector<std::string> class_names, const FeatureMatrix& weights,
                                     double tau) {
  if (class_names.size() < 2)
    throw InvalidArgument("text classifier needs at least 2 classes, got " + std::to_string(class_names.size()));
  if (static_cast<Index>(class_names.size()) != weights.rows())
    throw InvalidArgument("text classifier: " + std::to_string(class_names.size()) + " class names but " +
                          std::to_string(weights.rows()) + " weight rows");
  if (weights.cols() < 2) throw InvalidArgument("text classifier: embedding dimension must be >= 2");
  if (!(tau > 0.0) || !std::isfinite(tau)) throw InvalidArgument("text classifier: tau must be positive");
  std::set<std::string> seen;
  for (const auto& name : class_names)
    if (!seen.insert(name).second) throw ValidationError("text classifier: duplicate class name '" + name + "'");

  FeatureMatrix unit(weights.rows(), weights.cols());
  for (Index c = 0; c < weights.rows(); ++c) {
    if (!weights.row(c).allFinite() || weights.row(c).squaredNorm() == 0.0f)
      throw ValidationError("text classifier: zero or non-finite weight row", {c});
    unit.row(c) = normalized(weights.row(c).transpose()).transpose();
  }
  return TextClassifier(std::move(class_names), std::move(unit), tau);
}

// ---- EmbeddingStore -----------------------------------------------------------------------

EmbeddingStore::EmbeddingStore(FeatureMatrix rows, std::vector<ImageInfo> images, std::vector<StoreEntry> entries,
                               json meta)
    : rows_(std::move(rows)), images_(std::move(images)), entries_(std::move(entries)), meta_(std::move(meta)) {
  for (std::size_t i = 0; i < images_.size(); ++i) {
    if (!image_index_.emplace(images_[i].id, i).second)
      throw ValidationError("embedding store: duplicate image id '" + images_[i].id + "'");
  }
  for (const auto& e : entries_) {
    if (!row_index_.emplace(std::pair{e.image, e.view}, e.row).second)
      throw ValidationError("embedding store: duplicate key (" + e.image + ", " + e.view.str() + ")");
  }
}

const ImageInfo* EmbeddingStore::find_image(const std::string& id) const {
  const auto it = image_index_.find(id);
  return it == image_index_.end() ? nullptr : &images_[it->second];
}

std::optional<Index> EmbeddingStore::find(const std::string& image, const ViewKey& view) const {
  const auto it = row_index_.find(std::pair{image, view});
  if (it == row_index_.end()) return std::nullopt;
  return it->second;
}

void EmbeddingStore::validate() const {
  std::vector<Index> bad;
  for (const auto& e : entries_) {
    if (e.row < 0 || e.row >= count()) bad.push_back(e.row);
  }
  if (!bad.empty()) throw ValidationError("embedding store: manifest row index out of range", bad);
  for (const auto& e : entries_) {
    const ImageInfo* info = find_image(e.image);
    if (info == nullptr) throw ValidationError("embedding store: row references unknown image '" + e.image + "'");
    if (e.view.kind == ViewKey::Kind::Crop && !e.view.rect.valid_for(info->width, info->height))
      throw ValidationError("embedding store: crop " + e.view.str() + " outside image '" + e.image + "'", {e.row});
  }
  if (count() > 0 && dim() < 2) throw ValidationError("embedding store: dimension must be >= 2");
  require_unit_rows(rows_, "embedding store");
}

EmbeddingStore::Builder& EmbeddingStore::Builder::add_image(ImageInfo info) {
  images_.push_back(std::move(info));
  return *this;
}

EmbeddingStore::Builder& EmbeddingStore::Builder::add_row(const std::string& image, const ViewKey& view,
                                                          const FeatureVector& v, json extra) {
  if (v.size() != dim_)
    throw InvalidArgument("embedding store: row of dimension " + std::to_string(v.size()) + ", expected " +
                          std::to_string(dim_));
  entries_.push_back({image, view, static_cast<Index>(rows_.size()), std::move(extra)});
  rows_.push_back(v);
  return *this;
}

EmbeddingStore::Builder& EmbeddingStore::Builder::set_meta(const std::string& key, json value) {
  meta_[key] = std::move(value);
  return *this;
}

EmbeddingStore EmbeddingStore::Builder::build() && {
  FeatureMatrix m(static_cast<Index>(rows_.size()), dim_);
  for (std::size_t i = 0; i < rows_.size(); ++i) m.row(static_cast<Index>(i)) = rows_[i].transpose();
  EmbeddingStore store(std::move(m), std::move(images_), std::move(entries_), std::move(meta_));
  store.validate();
  return store;
}

// ---- binary format ------------------------------------------------------------------------

namespace {

constexpr std::uint8_t kMagic[4] = {0x56, 0x43, 0x52, 0x45};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFound("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

std::vector<std::uint8_t> encode_vcre(const FeatureMatrix& rows) {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  out.reserve(kVcreHeaderSize + static_cast<std::size_t>(rows.size()) * 4);
  put_u32(out, kVcreVersion);
  put_u32(out, static_cast<std::uint32_t>(rows.cols()));
  put_u64(out, static_cast<std::uint64_t>(rows.rows()));
  for (Index r = 0; r < rows.rows(); ++r)
    for (Index c = 0; c < rows.cols(); ++c) put_u32(out, std::bit_cast<std::uint32_t>(rows(r, c)));
  return out;
}

FeatureMatrix decode_vcre(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kVcreHeaderSize) throw FormatError("vcre: truncated header", bytes.size());
  for (std::size_t i = 0; i < 4; ++i)
    if (bytes[i] != kMagic[i]) throw FormatError("vcre: bad magic", i);
  const std::uint32_t version = get_u32(bytes.data() + 4);
  if (version != kVcreVersion) throw FormatError("vcre: unsupported version " + std::to_string(version), 4);
  const std::uint32_t dim = get_u32(bytes.data() + 8);
  if (dim < 2) throw FormatError("vcre: dimension must be >= 2, got " + std::to_string(dim), 8);
  const std::uint64_t count = get_u64(bytes.data() + 12);

  const std::uint64_t payload = bytes.size() - kVcreHeaderSize;
  const std::uint64_t max_values = payload / 4;
  if (count > max_values / dim || count * dim * 4 > payload)
    throw FormatError("vcre: truncated payload for " + std::to_string(count) + " rows of dimension " +
                          std::to_string(dim),
                      bytes.size());
  const std::uint64_t expected = kVcreHeaderSize + count * dim * 4;
  if (expected != bytes.size()) throw FormatError("vcre: trailing bytes after payload", expected);

  FeatureMatrix rows(static_cast<Index>(count), static_cast<Index>(dim));
  const std::uint8_t* p = bytes.data() + kVcreHeaderSize;
  for (Index r = 0; r < rows.rows(); ++r)
    for (Index c = 0; c < rows.cols(); ++c, p += 4) rows(r, c) = std::bit_cast<float>(get_u32(p));
  return rows;
}

FeatureMatrix read_vcre(const fs::path& path) {
  try {
    return decode_vcre(read_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what(), e.offset());
  }
}

void write_vcre(const FeatureMatrix& rows, const fs::path& path) {
  const auto bytes = encode_vcre(rows);
  write_file_atomic(path, std::string(bytes.begin(), bytes.end()));
}

fs::path sidecar_path(const fs::path& vcre_path) {
  fs::path p = vcre_path;
  return p.replace_extension(".json");
}

void require_unit_rows(const FeatureMatrix& rows, const std::string& what) {
  std::vector<Index> bad;
  for (Index r = 0; r < rows.rows(); ++r)
    if (!is_unit_norm(rows.row(r))) bad.push_back(r);
  if (!bad.empty()) throw ValidationError(what + ": " + std::to_string(bad.size()) + " rows are not unit-norm", bad);
}

// ---- manifests ----------------------------------------------------------------------------

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFound("cannot open '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": invalid JSON: " + e.what(), e.byte);
  }
}

void write_file_atomic(const fs::path& path, const std::string& bytes) {
  fs::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write '" + tmp.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for '" + tmp.string() + "'");
  }
  fs::rename(tmp, path);
}

void write_json_file(const fs::path& path, const json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

json view_to_json(const ViewKey& view) {
  switch (view.kind) {
    case ViewKey::Kind::Global:
      return "global";
    case ViewKey::Kind::Refined:
      return "refined";
    case ViewKey::Kind::Crop:
      break;
  }
  return json::array({view.rect.x, view.rect.y, view.rect.w, view.rect.h});
}

ViewKey view_from_json(const json& crop, bool flipped) {
  if (crop.is_string()) {
    const auto s = crop.get<std::string>();
    if (s == "global") return flipped ? ViewKey{ViewKey::Kind::Global, {}, true} : ViewKey::global();
    if (s == "refined") return ViewKey::refined();
    throw ValidationError("manifest: unknown crop tag '" + s + "'");
  }
  if (!crop.is_array() || crop.size() != 4) throw ValidationError("manifest: crop must be [x,y,w,h] or a tag");
  return ViewKey::crop({crop[0].get<int>(), crop[1].get<int>(), crop[2].get<int>(), crop[3].get<int>()}, flipped);
}

json store_manifest(const EmbeddingStore& store) {
  json j = store.meta().is_object() ? store.meta() : json::object();
  json images = json::array();
  for (const auto& im : store.images()) images.push_back({{"id", im.id}, {"width", im.width}, {"height", im.height}});
  json rows = json::array();
  for (const auto& e : store.entries()) {
    json r = e.extra.is_object() ? e.extra : json::object();
    r["image"] = e.image;
    r["crop"] = view_to_json(e.view);
    r["row"] = e.row;
    if (e.view.flipped) r["flip"] = true;
    rows.push_back(std::move(r));
  }
  j["images"] = std::move(images);
  j["rows"] = std::move(rows);
  return j;
}

EmbeddingStore store_from_manifest(FeatureMatrix rows, const json& manifest) {
  if (!manifest.is_object()) throw ValidationError("manifest: top level must be an object");
  try {
    std::vector<ImageInfo> images;
    for (const auto& im : manifest.value("images", json::array()))
      images.push_back({im.at("id").get<std::string>(), im.at("width").get<int>(), im.at("height").get<int>()});
    std::vector<StoreEntry> entries;
    for (const auto& r : manifest.value("rows", json::array())) {
      json extra = r;
      for (const char* k : {"image", "crop", "row", "flip"}) extra.erase(k);
      entries.push_back({r.at("image").get<std::string>(), view_from_json(r.at("crop"), r.value("flip", false)),
                         r.at("row").get<Index>(), std::move(extra)});
    }
    json meta = manifest;
    meta.erase("images");
    meta.erase("rows");
    EmbeddingStore store(std::move(rows), std::move(images), std::move(entries), std::move(meta));
    store.validate();
    return store;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("manifest: ") + e.what());
  }
}

EmbeddingStore load_embedding_file(const fs::path& path) {
  FeatureMatrix rows = read_vcre(path);
  const fs::path side = sidecar_path(path);
  json manifest = fs::exists(side) ? read_json_file(side) : json::object();
  return store_from_manifest(std::move(rows), manifest);
}

void write_embedding_file(const EmbeddingStore& store, const fs::path& path) {
  store.validate();
  write_vcre(store.rows(), path);
  write_json_file(sidecar_path(path), store_manifest(store));
}

TextClassifier load_text_classifier(const fs::path& path) {
  FeatureMatrix rows = read_vcre(path);
  const json manifest = read_json_file(sidecar_path(path));
  if (!manifest.contains("classes") || !manifest.contains("tau"))
    throw ValidationError(sidecar_path(path).string() + ": classifier manifest needs \"classes\" and \"tau\"");
  require_unit_rows(rows, path.string());
  return build_text_classifier(manifest.at("classes").get<std::vector<std::string>>(), rows,
                               manifest.at("tau").get<double>());
}

void write_text_classifier(const TextClassifier& clf, const fs::path& path) {
  write_vcre(clf.weights(), path);
  write_json_file(sidecar_path(path), json{{"classes", clf.class_names()}, {"tau", clf.tau()}});
}

EmbeddingStore load_exported_embeddings(const fs::path& vcre_path, const fs::path& crop_manifest_path) {
  FeatureMatrix rows = read_vcre(vcre_path);
  const json manifest = read_json_file(crop_manifest_path);
  const auto listed = manifest.value("rows", json::array()).size();
  if (listed != static_cast<std::size_t>(rows.rows()))
    throw ValidationError(vcre_path.string() + ": " + std::to_string(rows.rows()) + " rows but crop manifest lists " +
                          std::to_string(listed));
  return store_from_manifest(std::move(rows), manifest);
}

// ---- backends -----------------------------------------------------------------------------

FeatureVector encode_view(const EncoderBackend& backend, const std::string& image_id, const ViewKey& view) {
  const ImageInfo info = backend.image_info(image_id);
  if (view.kind == ViewKey::Kind::Crop && !view.rect.valid_for(info.width, info.height))
    throw InvalidArgument("crop " + view.str() + " is outside image '" + image_id + "' (" +
                          std::to_string(info.width) + "x" + std::to_string(info.height) + ")");
  return backend.encode(image_id, view);
}

StoreBackend::StoreBackend(std::shared_ptr<const EmbeddingStore> store) : store_(std::move(store)) {}

ImageInfo StoreBackend::image_info(const std::string& image_id) const {
  const ImageInfo* info = store_->find_image(image_id);
  if (info == nullptr) throw NotFound("unknown image '" + image_id + "'");
  return *info;
}

FeatureVector StoreBackend::encode(const std::string& image_id, const ViewKey& view) const {
  const ImageInfo info = image_info(image_id);
  const auto row = store_->find(image_id, view.canonical(info.width, info.height));
  if (!row) throw MissingEmbedding("no embedding for (" + image_id + ", " + view.str() + ")");
  return store_->rows().row(*row).transpose();
}

}  // namespace vcr
