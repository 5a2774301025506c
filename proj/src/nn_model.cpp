#include <openssl/evp.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <cstring>

#include "json.hpp"
#include <sstream>

#include "driftguard/error.hpp"
#include "driftguard/nn.hpp"

namespace driftguard::nn {
namespace {

Tensor relu(const Tensor& x) {
  Tensor y = x;
  for (double& v : y.data) v = v > 0.0 ? v : 0.0;
  return y;
}

// dy masked by the ReLU output.
void relu_backward_inplace(const Tensor& out, Tensor& dy) {
  for (std::size_t i = 0; i < dy.data.size(); ++i) {
    if (!(out.data[i] > 0.0)) dy.data[i] = 0.0;
  }
}

void fill_normal(Param& p, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : p.value) v = dist(rng);
}

std::string sha256_hex(const std::vector<unsigned char>& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr);
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", md[i]);
    hex += buf;
  }
  return hex;
}

void append_doubles(std::vector<unsigned char>& out, const std::vector<double>& values) {
  for (double v : values) {
    unsigned char b[sizeof(double)];
    std::memcpy(b, &v, sizeof v);
    out.insert(out.end(), b, b + sizeof v);
  }
}

}  // namespace

Model::Model(const ArchConfig& arch)
    : arch_(arch),
      stem_("stem.conv", 1, arch.channels[0], arch.stem_kernel, 2, false),
      stem_bn_("stem.bn", arch.channels[0], arch.bn_momentum, arch.bn_eps),
      attn_("attn", arch.channels[3]),
      classifier_("classifier", arch.channels[3], arch.n_classes) {
  if (arch.n_classes != kNumStages) throw Error(Errc::ShapeMismatch, "model emits exactly 5 stage logits");
  for (std::size_t k = 0; k < 3; ++k) {
    const std::string name = "block" + std::to_string(k + 1);
    const std::size_t cin = arch.channels[k];
    const std::size_t cout = arch.channels[k + 1];
    blocks_.push_back(Block{Conv1d(name + ".dw", cin, cin, arch.block_kernel, 2, true),
                            Conv1d(name + ".pw", cin, cout, 1, 1, false),
                            BatchNorm1d(name + ".bn", cout, arch.bn_momentum, arch.bn_eps),
                            SqueezeExcite(name + ".se", cout, arch.se_reduction)});
  }
}

void Model::init(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  fill_normal(stem_.weight, rng, std::sqrt(2.0 / static_cast<double>(arch_.stem_kernel)));
  for (std::size_t k = 0; k < 3; ++k) {
    auto& b = blocks_[k];
    const double cin = static_cast<double>(arch_.channels[k]);
    fill_normal(b.dw.weight, rng, std::sqrt(2.0 / static_cast<double>(arch_.block_kernel)));
    fill_normal(b.pw.weight, rng, std::sqrt(2.0 / cin));
    const double c = static_cast<double>(arch_.channels[k + 1]);
    const double h = static_cast<double>(b.se.b1.value.size());
    fill_normal(b.se.w1, rng, std::sqrt(2.0 / c));
    fill_normal(b.se.w2, rng, std::sqrt(1.0 / h));
    std::fill(b.se.b1.value.begin(), b.se.b1.value.end(), 0.0);
    std::fill(b.se.b2.value.begin(), b.se.b2.value.end(), 0.0);
  }
  fill_normal(attn_.score, rng, 1.0 / std::sqrt(static_cast<double>(arch_.channels[3])));
  fill_normal(classifier_.weight, rng, 0.01);
  std::fill(classifier_.bias.value.begin(), classifier_.bias.value.end(), 0.0);
  for (auto* bn : batch_norms()) {
    std::fill(bn->gamma.value.begin(), bn->gamma.value.end(), 1.0);
    std::fill(bn->beta.value.begin(), bn->beta.value.end(), 0.0);
    std::fill(bn->running_mean.value.begin(), bn->running_mean.value.end(), 0.0);
    std::fill(bn->running_var.value.begin(), bn->running_var.value.end(), 1.0);
  }
  touch();
}

std::vector<Prediction> Model::run(const Tensor& x, BnMode mode, ForwardCache& cache) const {
  if (x.batch == 0) throw Error(Errc::EmptyBatch, "forward on an empty batch");
  if (mode == BnMode::Train && x.batch < 2) {
    throw Error(Errc::TrainModeBatchTooSmall, "Train-mode BN needs at least 2 samples");
  }
  if (x.channels != 1 || x.length != arch_.input_len) {
    throw Error(Errc::ShapeMismatch, "input must be [B, 1, " + std::to_string(arch_.input_len) + "]");
  }
  cache.generation = generation_;
  cache.mode = mode;
  cache.batch = x.batch;
  cache.input = x;

  cache.blocks[0].input = relu(stem_bn_.forward(stem_.forward(x), mode, cache.stem_bn));
  Tensor out;
  for (std::size_t k = 0; k < 3; ++k) {
    const auto& blk = blocks_[k];
    auto& bc = cache.blocks[k];
    bc.dw_out = blk.dw.forward(bc.input);
    const Tensor act = relu(blk.bn.forward(blk.pw.forward(bc.dw_out), mode, bc.bn));
    out = blk.se.forward(act, bc.se);
    if (k < 2) cache.blocks[k + 1].input = out;
  }
  cache.pooled = attn_.forward(out, cache.attn);
  const std::vector<double> logits = classifier_.forward(cache.pooled, x.batch);

  std::vector<Prediction> preds(x.batch);
  for (std::size_t b = 0; b < x.batch; ++b) {
    auto& p = preds[b];
    std::copy_n(logits.begin() + static_cast<std::ptrdiff_t>(b * kNumStages), kNumStages, p.logits.begin());
    p.probs = softmax(p.logits);
    p.entropy = entropy(p.probs);
  }
  return preds;
}

ForwardResult Model::forward(const Tensor& x, BnMode mode, bool update_stats) {
  ForwardResult r;
  r.predictions = run(x, mode, r.cache);
  if (mode == BnMode::Train && update_stats) {
    stem_bn_.update_running(r.cache.stem_bn);
    for (std::size_t k = 0; k < 3; ++k) blocks_[k].bn.update_running(r.cache.blocks[k].bn);
  }
  return r;
}

std::vector<Prediction> Model::predict(const Tensor& x) const {
  ForwardCache cache;
  return run(x, BnMode::Eval, cache);
}

void Model::backward(const ForwardCache& cache, std::span<const double> dlogits, GradScope scope) {
  if (cache.generation != generation_) {
    throw Error(Errc::StaleCache, "parameters changed since the forward pass");
  }
  if (dlogits.size() != cache.batch * kNumStages) {
    throw Error(Errc::ShapeMismatch, "upstream gradient must be [B, 5]");
  }
  zero_grad();
  const bool all = scope == GradScope::All;
  const std::size_t B = cache.batch;

  const std::vector<double> dpooled = classifier_.backward(cache.pooled, dlogits, B, all, true);
  Tensor d = attn_.backward(cache.attn, dpooled, all);
  for (std::size_t k = 3; k-- > 0;) {
    auto& blk = blocks_[k];
    const auto& bc = cache.blocks[k];
    d = blk.se.backward(bc.se, d, all);
    relu_backward_inplace(bc.se.x, d);
    d = blk.bn.backward(bc.bn, d, true);
    d = blk.pw.backward(bc.dw_out, d, all, true);
    d = blk.dw.backward(bc.input, d, all, true);
  }
  relu_backward_inplace(cache.blocks[0].input, d);
  d = stem_bn_.backward(cache.stem_bn, d, true);
  stem_.backward(cache.input, d, all, false);
}

std::vector<Param*> Model::params() {
  std::vector<Param*> out{&stem_.weight, &stem_bn_.gamma, &stem_bn_.beta};
  for (auto& b : blocks_) {
    for (Param* p : {&b.dw.weight, &b.pw.weight, &b.bn.gamma, &b.bn.beta, &b.se.w1, &b.se.b1, &b.se.w2, &b.se.b2}) {
      out.push_back(p);
    }
  }
  out.push_back(&attn_.score);
  out.push_back(&classifier_.weight);
  out.push_back(&classifier_.bias);
  return out;
}

std::vector<const Param*> Model::params() const {
  auto mut = const_cast<Model*>(this)->params();
  return {mut.begin(), mut.end()};
}

std::vector<Buffer*> Model::buffers() {
  std::vector<Buffer*> out;
  for (auto* bn : batch_norms()) {
    out.push_back(&bn->running_mean);
    out.push_back(&bn->running_var);
  }
  return out;
}

std::vector<const Buffer*> Model::buffers() const {
  auto mut = const_cast<Model*>(this)->buffers();
  return {mut.begin(), mut.end()};
}

std::vector<BatchNorm1d*> Model::batch_norms() {
  std::vector<BatchNorm1d*> out{&stem_bn_};
  for (auto& b : blocks_) out.push_back(&b.bn);
  return out;
}

std::vector<const BatchNorm1d*> Model::batch_norms() const {
  auto mut = const_cast<Model*>(this)->batch_norms();
  return {mut.begin(), mut.end()};
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const Param* p : params()) n += p->value.size();
  return n;
}

void Model::zero_grad() {
  for (Param* p : params()) std::fill(p->grad.begin(), p->grad.end(), 0.0);
}

void Model::set_bn_momentum(double m) {
  for (auto* bn : batch_norms()) bn->set_momentum(m);
}

Tensor make_batch(std::span<const std::vector<double>> windows) {
  if (windows.empty()) throw Error(Errc::EmptyBatch, "no windows");
  const std::size_t L = windows.front().size();
  Tensor x(windows.size(), 1, L);
  for (std::size_t b = 0; b < windows.size(); ++b) {
    if (windows[b].size() != L) throw Error(Errc::ShapeMismatch, "windows differ in length");
    std::copy(windows[b].begin(), windows[b].end(), x.row(b, 0));
  }
  return x;
}

std::string backbone_hash(const Model& model) {
  std::vector<unsigned char> bytes;
  for (const Param* p : model.params()) {
    if (!p->is_bn_affine()) append_doubles(bytes, p->value);
  }
  return sha256_hex(bytes);
}

std::string full_hash(const Model& model) {
  std::vector<unsigned char> bytes;
  for (const Param* p : model.params()) append_doubles(bytes, p->value);
  for (const Buffer* b : model.buffers()) append_doubles(bytes, b->value);
  return sha256_hex(bytes);
}

// ---------------------------------------------------------------------------

namespace {

using nlohmann::json;

constexpr const char* kFormat = "driftguard-checkpoint";
constexpr int kVersion = 1;

json arch_to_json(const ArchConfig& a) {
  return json{{"input_len", a.input_len},   {"channels", a.channels},       {"stem_kernel", a.stem_kernel},
              {"block_kernel", a.block_kernel}, {"se_reduction", a.se_reduction}, {"n_classes", a.n_classes},
              {"bn_momentum", a.bn_momentum}, {"bn_eps", a.bn_eps}};
}

ArchConfig arch_from_json(const json& j) {
  ArchConfig a;
  a.input_len = j.at("input_len").get<std::size_t>();
  a.channels = j.at("channels").get<std::array<std::size_t, 4>>();
  a.stem_kernel = j.at("stem_kernel").get<std::size_t>();
  a.block_kernel = j.at("block_kernel").get<std::size_t>();
  a.se_reduction = j.at("se_reduction").get<std::size_t>();
  a.n_classes = j.at("n_classes").get<std::size_t>();
  a.bn_momentum = j.at("bn_momentum").get<double>();
  a.bn_eps = j.at("bn_eps").get<double>();
  return a;
}

void load_tensor(const json& tensors, const std::string& name, const std::vector<std::size_t>& shape,
                 std::vector<double>& dst) {
  if (!tensors.contains(name)) throw Error(Errc::CheckpointFormat, "missing tensor " + name);
  const json& t = tensors.at(name);
  if (t.at("shape").get<std::vector<std::size_t>>() != shape) {
    throw Error(Errc::CheckpointFormat, "shape mismatch for " + name);
  }
  auto values = t.at("values").get<std::vector<double>>();
  if (values.size() != dst.size()) throw Error(Errc::CheckpointFormat, "value count mismatch for " + name);
  dst = std::move(values);
}

}  // namespace

std::string checkpoint_json(const Model& model) {
  json tensors = json::object();
  for (const Param* p : model.params()) tensors[p->name] = json{{"shape", p->shape}, {"values", p->value}};
  for (const Buffer* b : model.buffers()) tensors[b->name] = json{{"shape", b->shape}, {"values", b->value}};
  json doc{{"format", kFormat}, {"version", kVersion}, {"arch", arch_to_json(model.arch())}, {"tensors", tensors}};
  return doc.dump();
}

void save_checkpoint(const Model& model, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << checkpoint_json(model) << '\n';
}

Model checkpoint_from_json(const std::string& text) {
  try {
    const json doc = json::parse(text);
    if (doc.at("format").get<std::string>() != kFormat) throw Error(Errc::CheckpointFormat, "not a checkpoint");
    if (doc.at("version").get<int>() != kVersion) throw Error(Errc::CheckpointFormat, "unsupported version");
    Model model(arch_from_json(doc.at("arch")));
    const json& tensors = doc.at("tensors");
    std::size_t expected = 0;
    for (Param* p : model.params()) {
      load_tensor(tensors, p->name, p->shape, p->value);
      ++expected;
    }
    for (Buffer* b : model.buffers()) {
      load_tensor(tensors, b->name, b->shape, b->value);
      ++expected;
    }
    if (tensors.size() != expected) throw Error(Errc::CheckpointFormat, "checkpoint holds unknown tensors");
    model.touch();
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::CheckpointFormat, e.what());
  }
}

Model load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::CheckpointFormat, "cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return checkpoint_from_json(ss.str());
}

}  // namespace driftguard::nn
