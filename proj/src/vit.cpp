#include "fwvit/vit.hpp"

#include <cmath>
#include <string>

#include "fwvit/errors.hpp"
#include "fwvit/lora.hpp"
#include "fwvit/ops.hpp"
#include "fwvit/rng.hpp"

namespace fwvit {

namespace {

std::vector<std::size_t> patch_index(const ModelSpec& spec) {
  const std::size_t p = spec.patch_size, g = spec.grid(), hw = spec.image_size;
  std::vector<std::size_t> idx;
  idx.reserve(spec.channels * hw * hw);
  for (std::size_t gy = 0; gy < g; ++gy)
    for (std::size_t gx = 0; gx < g; ++gx)
      for (std::size_t c = 0; c < spec.channels; ++c)
        for (std::size_t py = 0; py < p; ++py)
          for (std::size_t px = 0; px < p; ++px)
            idx.push_back(c * hw * hw + (gy * p + py) * hw + gx * p + px);
  return idx;
}

void add_block_params(ModelState& m, const std::string& prefix, std::size_t dim,
                      std::size_t hidden, Rng& rng) {
  auto weight = [&](std::size_t in, std::size_t out) {
    Tensor w({in, out});
    for (auto& v : w.data()) v = static_cast<float>(rng.truncated_normal(0.0, 0.02));
    return w;
  };
  m.add_parameter(prefix + ".ln1.gamma", Tensor::ones({dim}));
  m.add_parameter(prefix + ".ln1.beta", Tensor::zeros({dim}));
  for (const char* p : {"q", "k", "v", "out"}) {
    m.add_parameter(prefix + ".attn." + p + ".weight", weight(dim, dim));
    m.add_parameter(prefix + ".attn." + p + ".bias", Tensor::zeros({dim}));
  }
  m.add_parameter(prefix + ".ln2.gamma", Tensor::ones({dim}));
  m.add_parameter(prefix + ".ln2.beta", Tensor::zeros({dim}));
  m.add_parameter(prefix + ".mlp.fc1.weight", weight(dim, hidden));
  m.add_parameter(prefix + ".mlp.fc1.bias", Tensor::zeros({hidden}));
  m.add_parameter(prefix + ".mlp.fc2.weight", weight(hidden, dim));
  m.add_parameter(prefix + ".mlp.fc2.bias", Tensor::zeros({dim}));
}

// x . W + b, routed through the adapter when one wraps this projection.
Tensor project(const Tensor& x, const ModelState& m, const std::string& name) {
  const Tensor& w = m.tensor(name + ".weight");
  const LoraAdapter* adapter = m.adapter_for(name);
  Tensor y = adapter ? lora_forward(x, w, *adapter) : ops::matmul(x, w);
  return ops::add_rowvec(y, m.tensor(name + ".bias"));
}

Tensor norm(const Tensor& x, const ModelState& m, const std::string& name) {
  return ops::layer_norm(x, m.tensor(name + ".gamma"), m.tensor(name + ".beta"));
}

Tensor attention(const Tensor& x, const ModelState& m, const std::string& prefix,
                 std::size_t heads, std::vector<Tensor>* probs_out) {
  const std::size_t dim = x.dim(1), dh = dim / heads;
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));
  Tensor q = project(x, m, prefix + ".q");
  Tensor k = project(x, m, prefix + ".k");
  Tensor v = project(x, m, prefix + ".v");
  std::vector<Tensor> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor qh = ops::scale(ops::slice_cols(q, h * dh, (h + 1) * dh), inv_sqrt);
    Tensor kh = ops::slice_cols(k, h * dh, (h + 1) * dh);
    Tensor vh = ops::slice_cols(v, h * dh, (h + 1) * dh);
    Tensor p = ops::softmax_lastdim(ops::matmul_nt(qh, kh));
    if (probs_out) probs_out->push_back(p);
    outs.push_back(ops::matmul(p, vh));
  }
  return project(ops::concat_cols(outs), m, prefix + ".out");
}

Tensor block(const Tensor& x, const ModelState& m, const std::string& prefix, std::size_t heads,
             std::vector<Tensor>* probs_out) {
  Tensor h = ops::add(x, attention(norm(x, m, prefix + ".ln1"), m, prefix + ".attn", heads,
                                   probs_out));
  Tensor f = ops::gelu(project(norm(h, m, prefix + ".ln2"), m, prefix + ".mlp.fc1"));
  return ops::add(h, project(f, m, prefix + ".mlp.fc2"));
}

void check_finite(const Tensor& t, const std::string& where) {
  if (!all_finite(t)) throw NumericError("non-finite activation at " + where);
}

}  // namespace

Tensor patchify(const Tensor& image, const ModelSpec& spec) {
  spec.validate();
  const Shape expected{spec.channels, spec.image_size, spec.image_size};
  if (image.shape() != expected) {
    throw ShapeError("patchify: image " + shape_str(image.shape()) + " does not match spec " +
                     shape_str(expected));
  }
  const auto idx = patch_index(spec);
  return ops::gather(image, idx, {spec.num_patches(), spec.patch_dim()});
}

Tensor unpatchify(const Tensor& patches, const ModelSpec& spec) {
  spec.validate();
  const Shape expected{spec.num_patches(), spec.patch_dim()};
  if (patches.shape() != expected) {
    throw ShapeError("unpatchify: patches " + shape_str(patches.shape()) + " do not match " +
                     shape_str(expected));
  }
  const auto fwd = patch_index(spec);
  std::vector<std::size_t> inv(fwd.size());
  for (std::size_t i = 0; i < fwd.size(); ++i) inv[fwd[i]] = i;
  return ops::gather(patches, inv, {spec.channels, spec.image_size, spec.image_size});
}

ModelState init_model(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  ModelState m(spec);
  Rng rng(derive_seed(seed, "init"));
  auto normal = [&](Shape shape) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = static_cast<float>(rng.truncated_normal(0.0, 0.02));
    return t;
  };
  const std::size_t d = spec.embed_dim, dd = spec.dec_dim;
  m.add_parameter("patch_embed.weight", normal({spec.patch_dim(), d}));
  m.add_parameter("patch_embed.bias", Tensor::zeros({d}));
  m.add_parameter("cls_token", normal({1, d}));
  m.add_parameter("pos_embed", normal({spec.tokens(), d}));
  for (std::size_t i = 0; i < spec.enc_layers; ++i) {
    add_block_params(m, "enc." + std::to_string(i), d, d * spec.mlp_ratio, rng);
  }
  m.add_parameter("dec.embed.weight", normal({d, dd}));
  m.add_parameter("dec.embed.bias", Tensor::zeros({dd}));
  m.add_parameter("dec.pos_embed", normal({spec.tokens(), dd}));
  for (std::size_t i = 0; i < spec.dec_layers; ++i) {
    add_block_params(m, "dec." + std::to_string(i), dd, dd * spec.mlp_ratio, rng);
  }
  m.add_parameter("dec.ln.gamma", Tensor::ones({dd}));
  m.add_parameter("dec.ln.beta", Tensor::zeros({dd}));
  m.add_parameter("dec.head.weight", normal({dd, spec.patch_dim()}));
  m.add_parameter("dec.head.bias", Tensor::zeros({spec.patch_dim()}));
  return m;
}

EncodeResult encode(const Tensor& image, const ModelState& model) {
  return encode_patches(patchify(image, model.spec()), model);
}

EncodeResult encode_patches(const Tensor& patches, const ModelState& model) {
  const ModelSpec& spec = model.spec();
  const Shape expected{spec.num_patches(), spec.patch_dim()};
  if (patches.shape() != expected) {
    throw ShapeError("encode: patches " + shape_str(patches.shape()) + " do not match " +
                     shape_str(expected));
  }
  Tensor tokens = project(patches, model, "patch_embed");
  const Tensor parts[] = {model.tensor("cls_token"), tokens};
  Tensor x = ops::add(ops::concat_rows(parts), model.tensor("pos_embed"));
  check_finite(x, "encoder embedding");

  EncodeResult result;
  result.attention.resize(spec.enc_layers);
  for (std::size_t i = 0; i < spec.enc_layers; ++i) {
    x = block(x, model, "enc." + std::to_string(i), spec.enc_heads, &result.attention[i]);
    check_finite(x, "encoder layer " + std::to_string(i));
    result.layer_states.push_back(x);
    result.cls.push_back(ops::slice_rows(x, 0, 1));
  }
  result.latent = x;
  return result;
}

Tensor decode(const Tensor& latent, const ModelState& model) {
  const ModelSpec& spec = model.spec();
  const Shape expected{spec.tokens(), spec.embed_dim};
  if (latent.shape() != expected) {
    throw ShapeError("decode: latent " + shape_str(latent.shape()) + " does not match " +
                     shape_str(expected));
  }
  Tensor h = spec.cls_only_decode ? ops::repeat_rows(ops::slice_rows(latent, 0, 1), spec.tokens())
                                  : latent;
  h = ops::add(project(h, model, "dec.embed"), model.tensor("dec.pos_embed"));
  for (std::size_t i = 0; i < spec.dec_layers; ++i) {
    h = block(h, model, "dec." + std::to_string(i), spec.dec_heads, nullptr);
    check_finite(h, "decoder layer " + std::to_string(i));
  }
  h = norm(h, model, "dec.ln");
  Tensor pixels = project(ops::slice_rows(h, 1, spec.tokens()), model, "dec.head");
  return unpatchify(pixels, spec);
}

Tensor recon_loss(const Tensor& x, const Tensor& x_hat, float lambda_l1) {
  if (x.shape() != x_hat.shape()) {
    throw ShapeError("recon_loss: " + shape_str(x.shape()) + " vs " + shape_str(x_hat.shape()));
  }
  Tensor diff = ops::sub(x, x_hat);
  Tensor mse = ops::mean(ops::square(diff));
  if (lambda_l1 == 0.0f) return mse;
  return ops::add(mse, ops::scale(ops::mean(ops::abs(diff)), lambda_l1));
}

Tensor batch_recon_loss(const std::vector<Tensor>& images, const ModelState& model) {
  if (images.empty()) throw std::invalid_argument("batch_recon_loss: empty batch");
  Tensor total;
  for (const auto& img : images) {
    Tensor l = recon_loss(img, decode(encode(img, model).latent, model), model.spec().lambda_l1);
    total = total.defined() ? ops::add(total, l) : l;
  }
  return images.size() == 1 ? total : ops::scale(total, 1.0f / static_cast<float>(images.size()));
}

}  // namespace fwvit
