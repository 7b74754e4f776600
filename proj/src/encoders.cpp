#include "merl/encoders.hpp"

#include "merl/text.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <mutex>
#include <random>

namespace merl {

using nlohmann::json;

std::string_view to_string(Backbone backbone) {
  switch (backbone) {
    case Backbone::resnet1d_18: return "resnet1d_18";
    case Backbone::resnet1d_50: return "resnet1d_50";
    case Backbone::resnet1d_101: return "resnet1d_101";
    case Backbone::vit1d_tiny: return "vit1d_tiny";
  }
  return "";
}

Backbone parse_backbone(std::string_view name) {
  for (auto b : {Backbone::resnet1d_18, Backbone::resnet1d_50, Backbone::resnet1d_101,
                 Backbone::vit1d_tiny}) {
    if (to_string(b) == name) return b;
  }
  throw Error(ErrorCode::configuration, "unknown ECG backbone '" + std::string(name) + "'");
}

namespace {

struct ResNetLayout {
  std::array<int, 4> blocks;
  bool bottleneck;
};

ResNetLayout resnet_layout(Backbone b) {
  switch (b) {
    case Backbone::resnet1d_18: return {{2, 2, 2, 2}, false};
    case Backbone::resnet1d_50: return {{3, 4, 6, 3}, true};
    case Backbone::resnet1d_101: return {{3, 4, 23, 3}, true};
    default: break;
  }
  throw Error(ErrorCode::configuration, "not a ResNet backbone");
}

}  // namespace

int EncoderConfig::ecg_embed_dim() const {
  if (ecg_backbone == Backbone::vit1d_tiny) return vit_dim;
  return resnet_width * 8 * (resnet_layout(ecg_backbone).bottleneck ? 4 : 1);
}

void EncoderConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v <= 0) throw Error(ErrorCode::configuration, std::string(name) + " must be positive");
  };
  positive(input_leads, "input_leads");
  positive(input_samples, "input_samples");
  positive(text_embed_dim, "text_embed_dim");
  positive(shared_dim, "shared_dim");
  positive(projector_hidden, "projector_hidden");
  if (ecg_backbone == Backbone::vit1d_tiny) {
    positive(vit_dim, "vit_dim");
    positive(vit_depth, "vit_depth");
    positive(vit_heads, "vit_heads");
    positive(vit_mlp_ratio, "vit_mlp_ratio");
    positive(patch_length, "patch_length");
    if (input_samples % patch_length != 0) {
      throw Error(ErrorCode::configuration,
                  "input_samples (" + std::to_string(input_samples) +
                      ") is not divisible by the ViT patch length (" +
                      std::to_string(patch_length) + ")");
    }
    if (vit_dim % vit_heads != 0) {
      throw Error(ErrorCode::configuration, "vit_dim must be divisible by vit_heads");
    }
  } else {
    positive(resnet_width, "resnet_width");
  }
  if (text_encoder != "stub_hash" && text_encoder.rfind("adapter:", 0) != 0) {
    throw Error(ErrorCode::configuration, "text_encoder must be 'stub_hash' or 'adapter:<name>'");
  }
}

json EncoderConfig::to_json() const {
  return json{{"ecg_backbone", std::string(to_string(ecg_backbone))},
              {"input_leads", input_leads},
              {"input_samples", input_samples},
              {"resnet_width", resnet_width},
              {"vit_dim", vit_dim},
              {"vit_depth", vit_depth},
              {"vit_heads", vit_heads},
              {"vit_mlp_ratio", vit_mlp_ratio},
              {"patch_length", patch_length},
              {"text_encoder", text_encoder},
              {"text_embed_dim", text_embed_dim},
              {"text_trainable", text_trainable},
              {"shared_dim", shared_dim},
              {"projector_hidden", projector_hidden},
              {"init_seed", init_seed}};
}

EncoderConfig EncoderConfig::from_json(const json& j) {
  EncoderConfig c;
  c.ecg_backbone = parse_backbone(j.at("ecg_backbone").get<std::string>());
  c.input_leads = j.at("input_leads").get<int>();
  c.input_samples = j.at("input_samples").get<int>();
  c.resnet_width = j.at("resnet_width").get<int>();
  c.vit_dim = j.at("vit_dim").get<int>();
  c.vit_depth = j.at("vit_depth").get<int>();
  c.vit_heads = j.at("vit_heads").get<int>();
  c.vit_mlp_ratio = j.at("vit_mlp_ratio").get<int>();
  c.patch_length = j.at("patch_length").get<int>();
  c.text_encoder = j.at("text_encoder").get<std::string>();
  c.text_embed_dim = j.at("text_embed_dim").get<int>();
  c.text_trainable = j.at("text_trainable").get<bool>();
  c.shared_dim = j.at("shared_dim").get<int>();
  c.projector_hidden = j.at("projector_hidden").get<int>();
  c.init_seed = j.at("init_seed").get<std::uint64_t>();
  return c;
}

// ---------------------------------------------------------------------------

template <typename Scalar>
EcgEncoder<Scalar>::EcgEncoder(const EncoderConfig& config) : config_(config) {
  config.validate();
  std::mt19937_64 rng(derive_seed(config.init_seed, fnv1a64("ecg_encoder")));
  const Index leads = config.input_leads;
  if (config.ecg_backbone == Backbone::vit1d_tiny) {
    const Index dim = config.vit_dim;
    token_count_ = config.input_samples / config.patch_length;
    // The patch projection mixes all leads, producing one token stream.
    backbone_.add("patch_embed", std::make_unique<nn::Conv1d<Scalar>>(
                                     leads, dim, config.patch_length, config.patch_length, 0, true, rng));
    backbone_.add("pos_embed", std::make_unique<nn::PositionalEmbedding<Scalar>>(token_count_, dim, rng));
    auto blocks = std::make_unique<nn::Sequential<Scalar>>();
    for (int b = 0; b < config.vit_depth; ++b) {
      blocks->add(std::to_string(b), std::make_unique<nn::TransformerBlock<Scalar>>(
                                         dim, config.vit_heads, dim * config.vit_mlp_ratio, rng));
    }
    backbone_.add("blocks", std::move(blocks));
    backbone_.add("norm", std::make_unique<nn::LayerNorm<Scalar>>(dim));
    backbone_.add("pool", std::make_unique<nn::GlobalAvgPool<Scalar>>());
    embed_dim_ = dim;
    return;
  }

  const auto layout = resnet_layout(config.ecg_backbone);
  const Index width = config.resnet_width;
  backbone_.add("conv1", std::make_unique<nn::Conv1d<Scalar>>(leads, width, 7, 2, 3, false, rng))
      .add("bn1", std::make_unique<nn::BatchNorm1d<Scalar>>(width))
      .add("relu", std::make_unique<nn::ReLU<Scalar>>())
      .add("maxpool", std::make_unique<nn::MaxPool1d<Scalar>>(3, 2, 1));
  Index in_channels = width;
  for (int stage = 0; stage < 4; ++stage) {
    const Index channels = width << stage;
    auto seq = std::make_unique<nn::Sequential<Scalar>>();
    for (int b = 0; b < layout.blocks[static_cast<std::size_t>(stage)]; ++b) {
      const Index stride = (b == 0 && stage > 0) ? 2 : 1;
      if (layout.bottleneck) {
        seq->add(std::to_string(b),
                 std::make_unique<nn::Bottleneck<Scalar>>(in_channels, channels, stride, rng));
        in_channels = channels * nn::Bottleneck<Scalar>::expansion;
      } else {
        seq->add(std::to_string(b),
                 std::make_unique<nn::BasicBlock<Scalar>>(in_channels, channels, stride, rng));
        in_channels = channels;
      }
    }
    backbone_.add("layer" + std::to_string(stage + 1), std::move(seq));
  }
  backbone_.add("pool", std::make_unique<nn::GlobalAvgPool<Scalar>>());
  embed_dim_ = in_channels;
}

template <typename Scalar>
nn::Tensor<Scalar> EcgEncoder<Scalar>::make_input(std::span<const ECGRecord* const> records) const {
  if (records.empty()) throw Error(ErrorCode::batch_shape, "empty ECG batch");
  const Index leads = records.front()->num_leads();
  const Index samples = records.front()->num_samples();
  for (const auto* r : records) {
    if (r->num_leads() != leads || r->num_samples() != samples) {
      throw Error(ErrorCode::batch_shape,
                  "record '" + r->record_id + "' has shape " + std::to_string(r->num_leads()) +
                      "x" + std::to_string(r->num_samples()) + ", batch expects " +
                      std::to_string(leads) + "x" + std::to_string(samples));
    }
  }
  if (leads != config_.input_leads) {
    throw Error(ErrorCode::batch_shape, "encoder expects " + std::to_string(config_.input_leads) +
                                            " leads, batch has " + std::to_string(leads));
  }
  if (config_.ecg_backbone == Backbone::vit1d_tiny && samples != config_.input_samples) {
    throw Error(ErrorCode::batch_shape, "ViT encoder expects " +
                                            std::to_string(config_.input_samples) + " samples");
  }
  const Index n = static_cast<Index>(records.size());
  nn::Tensor<Scalar> x{Matrix<Scalar>(n * samples, leads), n, samples};
  for (Index i = 0; i < n; ++i) {
    x.data.middleRows(i * samples, samples) =
        records[static_cast<std::size_t>(i)]->signal.transpose().template cast<Scalar>();
  }
  return x;
}

template <typename Scalar>
Matrix<Scalar> EcgEncoder<Scalar>::forward_tensor(const nn::Tensor<Scalar>& input, nn::Mode mode) {
  return backbone_.forward(input, mode).data;
}

template <typename Scalar>
Matrix<Scalar> EcgEncoder<Scalar>::forward(std::span<const ECGRecord* const> records, nn::Mode mode) {
  return forward_tensor(make_input(records), mode);
}

template <typename Scalar>
Matrix<Scalar> EcgEncoder<Scalar>::forward(std::span<const ECGRecord> records, nn::Mode mode) {
  std::vector<const ECGRecord*> ptrs;
  ptrs.reserve(records.size());
  for (const auto& r : records) ptrs.push_back(&r);
  return forward(std::span<const ECGRecord* const>(ptrs), mode);
}

template <typename Scalar>
void EcgEncoder<Scalar>::backward(const Matrix<Scalar>& grad) {
  backbone_.backward(nn::Tensor<Scalar>::from_rows(grad));
}

template <typename Scalar>
nn::ParamList<Scalar> EcgEncoder<Scalar>::parameters() {
  nn::ParamList<Scalar> out;
  backbone_.collect("ecg", out);
  return out;
}

template <typename Scalar>
std::size_t EcgEncoder<Scalar>::parameter_count() {
  std::size_t count = 0;
  for (const auto& p : parameters()) {
    if (p.trainable()) count += static_cast<std::size_t>(p.value->size());
  }
  return count;
}

// ---------------------------------------------------------------------------

namespace {

std::mutex& adapter_mutex() {
  static std::mutex m;
  return m;
}

std::map<std::string, TextAdapterFactory>& adapter_registry() {
  static std::map<std::string, TextAdapterFactory> registry;
  return registry;
}

}  // namespace

void register_text_adapter(const std::string& name, TextAdapterFactory factory) {
  std::lock_guard lock(adapter_mutex());
  adapter_registry()[name] = std::move(factory);
}

void unregister_text_adapter(const std::string& name) {
  std::lock_guard lock(adapter_mutex());
  adapter_registry().erase(name);
}

template <typename Scalar>
TextEncoder<Scalar>::TextEncoder(const EncoderConfig& config)
    : dim_(config.text_embed_dim), trainable_(config.text_trainable) {
  if (config.text_encoder == "stub_hash") return;
  const std::string name = config.text_encoder.substr(std::string("adapter:").size());
  TextAdapterFactory factory;
  {
    std::lock_guard lock(adapter_mutex());
    const auto it = adapter_registry().find(name);
    if (it != adapter_registry().end()) factory = it->second;
  }
  if (!factory) {
    throw Error(ErrorCode::capability, "text encoder adapter '" + name + "' is not available");
  }
  adapter_ = factory();
  if (!adapter_) throw Error(ErrorCode::capability, "text adapter '" + name + "' failed to load");
  if (adapter_->dim() != config.text_embed_dim) {
    throw Error(ErrorCode::configuration, "text adapter '" + name + "' produces " +
                                              std::to_string(adapter_->dim()) +
                                              "-d vectors, config says " +
                                              std::to_string(config.text_embed_dim));
  }
  if (trainable_ && !adapter_->supports_training()) {
    throw Error(ErrorCode::capability,
                "text adapter '" + name + "' is frozen; set text_trainable=false");
  }
}

template <typename Scalar>
Vector<Scalar> TextEncoder<Scalar>::hash_vector(const std::string& token) const {
  std::mt19937_64 rng(fnv1a64(token));
  std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(dim_)));
  Vector<Scalar> v(dim_);
  for (Index i = 0; i < dim_; ++i) v(i) = static_cast<Scalar>(dist(rng));
  return v;
}

template <typename Scalar>
Vector<Scalar> TextEncoder<Scalar>::token_vector(const std::string& token) const {
  const auto it = learned_.find(token);
  return it != learned_.end() ? it->second.value : hash_vector(token);
}

template <typename Scalar>
Matrix<Scalar> TextEncoder<Scalar>::forward(std::span<const std::string> texts) {
  Matrix<Scalar> out(static_cast<Index>(texts.size()), dim_);
  last_tokens_.clear();
  for (std::size_t i = 0; i < texts.size(); ++i) {
    if (adapter_) {
      out.row(static_cast<Index>(i)) = adapter_->embed(texts[i]).template cast<Scalar>().transpose();
      continue;
    }
    auto tokens = tokenize(texts[i]);
    if (tokens.empty()) {
      throw Error(ErrorCode::invalid_argument, "text has no tokens: '" + texts[i] + "'");
    }
    Vector<Scalar> sum = Vector<Scalar>::Zero(dim_);
    for (const auto& t : tokens) sum += token_vector(t);
    out.row(static_cast<Index>(i)) = (sum / static_cast<Scalar>(tokens.size())).transpose();
    last_tokens_.push_back(std::move(tokens));
  }
  return out;
}

template <typename Scalar>
void TextEncoder<Scalar>::backward(const Matrix<Scalar>& grad) {
  if (!trainable_ || adapter_) return;
  for (std::size_t i = 0; i < last_tokens_.size(); ++i) {
    const auto& tokens = last_tokens_[i];
    const Vector<Scalar> g = grad.row(static_cast<Index>(i)).transpose() /
                             static_cast<Scalar>(tokens.size());
    for (const auto& t : tokens) {
      auto [it, inserted] = learned_.try_emplace(t);
      auto& state = it->second;
      if (inserted) {
        state.value = hash_vector(t);
        state.grad = Vector<Scalar>::Zero(dim_);
        state.m = Vector<Scalar>::Zero(dim_);
        state.v = Vector<Scalar>::Zero(dim_);
      }
      state.grad += g;
      state.touched = true;
    }
  }
}

template <typename Scalar>
void TextEncoder<Scalar>::zero_grad() {
  for (auto& [token, state] : learned_) {
    state.grad.setZero();
    state.touched = false;
  }
}

// ---------------------------------------------------------------------------

template <typename Scalar>
Projector<Scalar>::Projector(Index in_dim, Index hidden, Index out_dim, std::mt19937_64& rng)
    : in_dim_(in_dim), out_dim_(out_dim) {
  layers_.add("fc1", std::make_unique<nn::Linear<Scalar>>(in_dim, hidden, true, rng))
      .add("relu", std::make_unique<nn::ReLU<Scalar>>())
      .add("fc2", std::make_unique<nn::Linear<Scalar>>(hidden, out_dim, true, rng));
}

template <typename Scalar>
Matrix<Scalar> Projector<Scalar>::forward(const Matrix<Scalar>& z, nn::Mode mode) {
  if (z.cols() != in_dim_) {
    throw Error(ErrorCode::dimension_mismatch, "projector expects " + std::to_string(in_dim_) +
                                                   " columns, got " + std::to_string(z.cols()));
  }
  const auto h = layers_.forward(nn::Tensor<Scalar>::from_rows(z), mode);
  const Index guarded = normalizer_.forward(h.data);
  if (guarded > 0) {
    warn("projector output had " + std::to_string(guarded) +
         " near-zero row(s); normalization was epsilon-guarded");
  }
  return normalizer_.output;
}

template <typename Scalar>
Matrix<Scalar> Projector<Scalar>::backward(const Matrix<Scalar>& grad) {
  return layers_.backward(nn::Tensor<Scalar>::from_rows(normalizer_.backward(grad))).data;
}

template <typename Scalar>
nn::ParamList<Scalar> Projector<Scalar>::parameters(const std::string& prefix) {
  nn::ParamList<Scalar> out;
  layers_.collect(prefix, out);
  return out;
}

// ---------------------------------------------------------------------------

namespace {

template <typename Scalar>
Projector<Scalar> make_projector(const EncoderConfig& c, Index in_dim, const char* stream) {
  std::mt19937_64 rng(derive_seed(c.init_seed, fnv1a64(stream)));
  return Projector<Scalar>(in_dim, c.projector_hidden, c.shared_dim, rng);
}

constexpr char kCheckpointMagic[8] = {'M', 'E', 'R', 'L', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

void write_floats(std::ostream& out, const float* data, std::size_t count) {
  static_assert(std::endian::native == std::endian::little,
                "checkpoint writer assumes a little-endian host");
  out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * sizeof(float)));
}

}  // namespace

template <typename Scalar>
MerlModel<Scalar>::MerlModel(const EncoderConfig& config)
    : config_(config),
      ecg_(config),
      text_(config),
      ecg_projector_(make_projector<Scalar>(config, config.ecg_embed_dim(), "ecg_projector")),
      text_projector_(make_projector<Scalar>(config, config.text_embed_dim, "text_projector")) {}

template <typename Scalar>
nn::ParamList<Scalar> MerlModel<Scalar>::parameters() {
  nn::ParamList<Scalar> out = ecg_.parameters();
  for (auto& p : ecg_projector_.parameters("ecg_proj")) out.push_back(p);
  for (auto& p : text_projector_.parameters("text_proj")) out.push_back(p);
  return out;
}

template <typename Scalar>
void MerlModel<Scalar>::zero_grad() {
  for (auto& p : parameters()) {
    if (p.grad) p.grad->setZero();
  }
  text_.zero_grad();
}

template <typename Scalar>
std::string MerlModel<Scalar>::ecg_encoder_hash() {
  std::string bytes;
  for (const auto& p : ecg_.parameters()) {
    bytes += p.name;
    bytes.push_back('\0');
    const Matrix<float> v = p.value->template cast<float>();
    const auto rows = static_cast<std::uint64_t>(v.rows()), cols = static_cast<std::uint64_t>(v.cols());
    bytes.append(reinterpret_cast<const char*>(&rows), sizeof rows);
    bytes.append(reinterpret_cast<const char*>(&cols), sizeof cols);
    bytes.append(reinterpret_cast<const char*>(v.data()), static_cast<std::size_t>(v.size()) * sizeof(float));
  }
  return sha256_hex(bytes);
}

// Container layout: 8-byte magic "MERLCKPT", uint32 version, uint64 header
// length, UTF-8 JSON header, then float32 little-endian blobs. Dense
// matrices are column-major; offsets in the header count floats from the
// start of the payload.
template <typename Scalar>
void MerlModel<Scalar>::save(const std::filesystem::path& path, const json& metadata) const {
  auto& self = const_cast<MerlModel&>(*this);
  json tensors = json::array();
  std::vector<Matrix<float>> blobs;
  std::uint64_t offset = 0;
  for (const auto& p : self.parameters()) {
    blobs.push_back(p.value->template cast<float>());
    tensors.push_back({{"name", p.name},
                       {"rows", p.value->rows()},
                       {"cols", p.value->cols()},
                       {"offset", offset},
                       {"trainable", p.trainable()}});
    offset += static_cast<std::uint64_t>(p.value->size());
  }
  json tokens = json::array();
  for (const auto& [token, state] : text_.learned_tokens()) {
    blobs.push_back(state.value.template cast<float>());
    tokens.push_back({{"token", token}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(state.value.size());
  }
  const std::string config_dump = config_.to_json().dump();
  json header{{"format", "merl-checkpoint"},
              {"version", kCheckpointVersion},
              {"config", config_.to_json()},
              {"config_fingerprint", sha256_hex(config_dump)},
              {"metadata", metadata},
              {"tensors", tensors},
              {"text_tokens", tokens},
              {"payload_floats", offset}};
  const std::string header_text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error(ErrorCode::io, "cannot write checkpoint " + path.string());
    out.write(kCheckpointMagic, sizeof kCheckpointMagic);
    const std::uint32_t version = kCheckpointVersion;
    const std::uint64_t header_len = header_text.size();
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    out.write(reinterpret_cast<const char*>(&header_len), sizeof header_len);
    out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    for (const auto& b : blobs) write_floats(out, b.data(), static_cast<std::size_t>(b.size()));
    if (!out) throw Error(ErrorCode::io, "failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

template <typename Scalar>
MerlModel<Scalar> MerlModel<Scalar>::load(const std::filesystem::path& path, json* metadata) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open checkpoint " + path.string());
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t header_len = 0;
  if (!in.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw Error(ErrorCode::parse, path.string() + ": not a MERL checkpoint");
  }
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&header_len), sizeof header_len);
  if (!in || version != kCheckpointVersion) {
    throw Error(ErrorCode::parse, path.string() + ": unsupported checkpoint version");
  }
  std::string header_text(header_len, '\0');
  if (!in.read(header_text.data(), static_cast<std::streamsize>(header_len))) {
    throw Error(ErrorCode::parse, path.string() + ": truncated header");
  }
  const json header = json::parse(header_text);
  const auto payload_floats = header.at("payload_floats").get<std::uint64_t>();
  std::vector<float> payload(payload_floats);
  if (!in.read(reinterpret_cast<char*>(payload.data()),
               static_cast<std::streamsize>(payload_floats * sizeof(float)))) {
    throw Error(ErrorCode::parse, path.string() + ": truncated payload");
  }

  MerlModel model(EncoderConfig::from_json(header.at("config")));
  std::map<std::string, const json*> by_name;
  for (const auto& t : header.at("tensors")) by_name[t.at("name").get<std::string>()] = &t;
  for (auto& p : model.parameters()) {
    const auto it = by_name.find(p.name);
    if (it == by_name.end()) {
      throw Error(ErrorCode::parse, path.string() + ": missing tensor '" + p.name + "'");
    }
    const auto& t = *it->second;
    const auto rows = t.at("rows").template get<Index>(), cols = t.at("cols").template get<Index>();
    const auto off = t.at("offset").template get<std::uint64_t>();
    if (rows != p.value->rows() || cols != p.value->cols() ||
        off + static_cast<std::uint64_t>(rows * cols) > payload_floats) {
      throw Error(ErrorCode::parse, path.string() + ": tensor '" + p.name + "' has wrong shape");
    }
    *p.value = Eigen::Map<const Matrix<float>>(payload.data() + off, rows, cols).template cast<Scalar>();
  }
  const Index dim = model.text_.dim();
  for (const auto& t : header.at("text_tokens")) {
    const auto off = t.at("offset").get<std::uint64_t>();
    if (off + static_cast<std::uint64_t>(dim) > payload_floats) {
      throw Error(ErrorCode::parse, path.string() + ": token table out of range");
    }
    auto& state = model.text_.learned_tokens()[t.at("token").get<std::string>()];
    state.value = Eigen::Map<const Vector<float>>(payload.data() + off, dim).template cast<Scalar>();
    state.grad = Vector<Scalar>::Zero(dim);
    state.m = Vector<Scalar>::Zero(dim);
    state.v = Vector<Scalar>::Zero(dim);
  }
  if (metadata) *metadata = header.value("metadata", json::object());
  return model;
}

// ---------------------------------------------------------------------------

template <typename Scalar>
Matrix<Scalar> encode_ecg_batch(std::span<const ECGRecord> records, MerlModel<Scalar>& model) {
  return model.ecg().forward(records, nn::Mode::eval);
}

template <typename Scalar>
Matrix<Scalar> encode_report_batch(std::span<const ClinicalReport> reports, MerlModel<Scalar>& model) {
  std::vector<std::string> texts;
  texts.reserve(reports.size());
  for (const auto& r : reports) texts.push_back(r.text);
  return model.text().forward(texts);
}

template <typename Scalar>
Matrix<Scalar> project_and_normalize(const Matrix<Scalar>& z, Modality which,
                                     MerlModel<Scalar>& model) {
  auto& projector = which == Modality::ecg ? model.ecg_projector() : model.text_projector();
  return projector.forward(z, nn::Mode::eval);
}

template class EcgEncoder<float>;
template class EcgEncoder<double>;
template class TextEncoder<float>;
template class TextEncoder<double>;
template class Projector<float>;
template class Projector<double>;
template class MerlModel<float>;
template class MerlModel<double>;

template Matrix<float> encode_ecg_batch(std::span<const ECGRecord>, MerlModel<float>&);
template Matrix<double> encode_ecg_batch(std::span<const ECGRecord>, MerlModel<double>&);
template Matrix<float> encode_report_batch(std::span<const ClinicalReport>, MerlModel<float>&);
template Matrix<double> encode_report_batch(std::span<const ClinicalReport>, MerlModel<double>&);
template Matrix<float> project_and_normalize(const Matrix<float>&, Modality, MerlModel<float>&);
template Matrix<double> project_and_normalize(const Matrix<double>&, Modality, MerlModel<double>&);

}  // namespace merl
