#pragma once

// Patch-tokenized transformer encoder plus a lightweight transformer decoder
// that reconstructs the input image from the top encoder layer.
//
// Images are [C x H x W] float tensors with pixels in [0,1]. Blocks are
// pre-norm: x += Attn(LN(x)); x += MLP(LN(x)). Layer l's state is the token
// matrix after block l, so the CLS embedding of layer l is row 0 of that
// state and the "top layer" is enc_layers - 1.

#include <cstdint>
#include <vector>

#include "fwvit/model_state.hpp"
#include "fwvit/tensor.hpp"

namespace fwvit {

// Patch vectors are laid out channel-major (c, py, px); patches in row-major
// grid order.
Tensor patchify(const Tensor& image, const ModelSpec& spec);
Tensor unpatchify(const Tensor& patches, const ModelSpec& spec);

ModelState init_model(const ModelSpec& spec, std::uint64_t seed);

struct EncodeResult {
  std::vector<Tensor> layer_states;                // per layer, [tokens x embed_dim]
  std::vector<Tensor> cls;                         // per layer, [1 x embed_dim]
  std::vector<std::vector<Tensor>> attention;      // [layer][head] -> [tokens x tokens]
  Tensor latent;                                   // == layer_states.back()
};

EncodeResult encode(const Tensor& image, const ModelState& model);
// Encodes an already patchified image [num_patches x patch_dim].
EncodeResult encode_patches(const Tensor& patches, const ModelState& model);
Tensor decode(const Tensor& latent, const ModelState& model);

// mean((x - x_hat)^2) + lambda * mean(|x - x_hat|)
Tensor recon_loss(const Tensor& x, const Tensor& x_hat, float lambda_l1);

// Mean reconstruction loss over a batch, as one differentiable scalar.
Tensor batch_recon_loss(const std::vector<Tensor>& images, const ModelState& model);

}  // namespace fwvit
