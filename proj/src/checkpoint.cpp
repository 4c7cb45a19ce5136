#include "pairstn/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <utility>
#include <vector>

#include "json.hpp"
#include "pairstn/error.hpp"

using nlohmann::json;

namespace pairstn {

namespace {

constexpr char kMagic[5] = {'V', 'N', 'E', 'T', '1'};

struct NamedTensor {
  std::string name;
  const Tensor* tensor;
};

std::vector<NamedTensor> directory_of(const std::vector<const LayerParams*>& params) {
  std::vector<NamedTensor> out;
  for (const auto* p : params) {
    out.push_back({p->name + ".w", &p->w});
    out.push_back({p->name + ".b", &p->b});
  }
  return out;
}

void write_container(const std::string& path, const json& meta,
                     const std::vector<NamedTensor>& tensors) {
  json dir = json::array();
  std::size_t offset = 0;
  for (const auto& nt : tensors) {
    json t;
    t["name"] = nt.name;
    t["shape"] = nt.tensor->shape;
    t["offset"] = offset;
    dir.push_back(t);
    offset += nt.tensor->numel() * sizeof(float);
  }
  json full = meta;
  full["tensors"] = dir;
  const std::string header = full.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint '" + path + "'");
  out.write(kMagic, sizeof(kMagic));
  const auto len = static_cast<std::uint32_t>(header.size());
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& nt : tensors) {
    std::vector<float> buf(nt.tensor->numel());
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(nt.tensor->data[i]);
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  if (!out) throw IoError("failed writing checkpoint '" + path + "'");
}

struct Container {
  json meta;
  std::vector<char> payload;
};

Container read_container(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  char magic[5];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw IoError("checkpoint '" + path + "': bad magic");
  std::uint32_t len = 0;
  if (!in.read(reinterpret_cast<char*>(&len), sizeof(len)))
    throw IoError("checkpoint '" + path + "': truncated header");
  std::string header(len, '\0');
  if (!in.read(header.data(), len)) throw IoError("checkpoint '" + path + "': truncated metadata");
  Container c;
  try {
    c.meta = json::parse(header);
  } catch (const json::exception& e) {
    throw IoError("checkpoint '" + path + "': corrupt metadata (" + e.what() + ")");
  }
  c.payload.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());

  std::size_t expected = 0;
  for (const auto& t : c.meta.at("tensors")) {
    std::size_t n = 1;
    for (int e : t.at("shape").get<std::vector<int>>()) n *= static_cast<std::size_t>(e);
    const auto off = t.at("offset").get<std::size_t>();
    if (off != expected)
      throw IoError("checkpoint '" + path + "': tensor '" + t.at("name").get<std::string>() +
                    "' has unexpected offset");
    expected += n * sizeof(float);
  }
  if (c.payload.size() != expected)
    throw IoError("checkpoint '" + path + "': payload is " + std::to_string(c.payload.size()) +
                  " bytes, expected " + std::to_string(expected));
  return c;
}

void fill_tensors(const Container& c, const std::string& path,
                  const std::vector<NamedTensor>& expected) {
  const auto& dir = c.meta.at("tensors");
  if (dir.size() != expected.size())
    throw IoError("checkpoint '" + path + "': directory has " + std::to_string(dir.size()) +
                  " tensors, model needs " + std::to_string(expected.size()));
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const auto& t = dir[i];
    const auto name = t.at("name").get<std::string>();
    if (name != expected[i].name)
      throw IoError("checkpoint '" + path + "': tensor '" + name + "' where '" +
                    expected[i].name + "' was expected");
    const auto shape = t.at("shape").get<std::vector<int>>();
    if (shape != expected[i].tensor->shape)
      throw IoError("checkpoint '" + path + "': tensor '" + name + "' shape mismatch");
    const auto off = t.at("offset").get<std::size_t>();
    auto* dst = const_cast<Tensor*>(expected[i].tensor);
    const char* src = c.payload.data() + off;
    for (std::size_t k = 0; k < dst->numel(); ++k) {
      float f;
      std::memcpy(&f, src + k * sizeof(float), sizeof(float));
      dst->data[k] = static_cast<double>(f);
    }
  }
}

json scoring_dims(const ScoringNet& net) {
  json d;
  d["image_size"] = net.image_size;
  d["channels"] = net.channels;
  d["feature_dim"] = net.feature_dim;
  d["feat_c1"] = net.fr.conv1.w.dim(0);
  d["feat_c2"] = net.fr.conv2.w.dim(0);
  d["feat_c3"] = net.fr.conv3.w.dim(0);
  d["loc_c"] = net.locs.empty() ? 0 : net.locs.front().conv1.w.dim(0);
  if (net.category) {
    d["category_dim"] = net.category->feature_dim;
    d["num_categories"] = net.category->num_classes;
    d["cat_c1"] = net.category->conv1.w.dim(0);
    d["cat_c2"] = net.category->conv2.w.dim(0);
  }
  return d;
}

}  // namespace

void save_checkpoint(const ScoringNet& net, const std::string& path, int epoch,
                     std::uint64_t seed) {
  json meta;
  meta["variant"] = variant_name(net.variant);
  meta["epoch"] = epoch;
  meta["seed"] = seed;
  meta["dims"] = scoring_dims(net);
  write_container(path, meta, directory_of(net.all_params()));
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  Container c = read_container(path);
  LoadedCheckpoint out;
  try {
    const Variant variant = variant_from_string(c.meta.at("variant").get<std::string>());
    const json& d = c.meta.at("dims");
    out.epoch = c.meta.at("epoch").get<int>();
    out.seed = c.meta.at("seed").get<std::uint64_t>();

    Rng rng(0);
    std::optional<CategoryNet> category;
    if (variant_has_category(variant))
      category = CategoryNet::make(d.at("image_size").get<int>(), d.at("channels").get<int>(),
                                   d.at("category_dim").get<int>(),
                                   d.at("num_categories").get<int>(), d.at("cat_c1").get<int>(),
                                   d.at("cat_c2").get<int>(), rng);
    out.net = ScoringNet::make(variant, d.at("image_size").get<int>(), d.at("channels").get<int>(),
                               d.at("feature_dim").get<int>(), d.at("feat_c1").get<int>(),
                               d.at("feat_c2").get<int>(), d.at("feat_c3").get<int>(),
                               d.at("loc_c").get<int>(), rng, std::move(category));
  } catch (const json::exception& e) {
    throw IoError("checkpoint '" + path + "': corrupt metadata (" + std::string(e.what()) + ")");
  }
  fill_tensors(c, path, directory_of(std::as_const(out.net).all_params()));
  return out;
}

void save_category_checkpoint(const CategoryNet& net, const std::string& path, int epoch,
                              std::uint64_t seed) {
  json meta;
  meta["variant"] = "category";
  meta["epoch"] = epoch;
  meta["seed"] = seed;
  json d;
  d["image_size"] = net.input_size;
  d["channels"] = net.in_channels;
  d["category_dim"] = net.feature_dim;
  d["num_categories"] = net.num_classes;
  d["cat_c1"] = net.conv1.w.dim(0);
  d["cat_c2"] = net.conv2.w.dim(0);
  meta["dims"] = d;
  std::vector<const LayerParams*> params;
  for (const auto* p : net.params()) params.push_back(p);
  write_container(path, meta, directory_of(params));
}

CategoryNet load_category_checkpoint(const std::string& path) {
  Container c = read_container(path);
  CategoryNet net;
  try {
    if (c.meta.at("variant").get<std::string>() != "category")
      throw IoError("checkpoint '" + path + "' is not a category checkpoint");
    const json& d = c.meta.at("dims");
    Rng rng(0);
    net = CategoryNet::make(d.at("image_size").get<int>(), d.at("channels").get<int>(),
                            d.at("category_dim").get<int>(), d.at("num_categories").get<int>(),
                            d.at("cat_c1").get<int>(), d.at("cat_c2").get<int>(), rng);
  } catch (const json::exception& e) {
    throw IoError("checkpoint '" + path + "': corrupt metadata (" + std::string(e.what()) + ")");
  }
  std::vector<const LayerParams*> params;
  for (const auto* p : net.params()) params.push_back(p);
  fill_tensors(c, path, directory_of(params));
  return net;
}

}  // namespace pairstn
