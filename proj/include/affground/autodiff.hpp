#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "affground/tensor.hpp"

namespace affground::ag {

struct Node;
using NodePtr = std::shared_ptr<Node>;

// One vertex in a dynamically built compute graph. `backward` receives the
// gradient w.r.t. this node and pointers to the input gradient buffers
// (nullptr for inputs that do not require grad).
struct Node {
    Tensor value;
    std::vector<NodePtr> inputs;
    std::function<void(const Tensor& g, const std::vector<Tensor*>& in_grads)> backward;
    bool requires_grad = false;
    std::string name;  // nonempty for parameters
};

using GradMap = std::unordered_map<const Node*, Tensor>;

NodePtr constant(Tensor v);
NodePtr leaf(Tensor v, std::string name);  // requires_grad parameter/leaf

// Reverse-mode sweep from `root`. Seed defaults to ones (root is normally a
// scalar loss). Returns gradients for every reachable node requiring grad.
GradMap backward(const NodePtr& root, const Tensor* seed = nullptr);
const Tensor* find_grad(const GradMap& grads, const NodePtr& node);

// ---- elementwise / linear algebra ----
NodePtr add(const NodePtr& a, const NodePtr& b);
NodePtr sub(const NodePtr& a, const NodePtr& b);
NodePtr mul(const NodePtr& a, const NodePtr& b);
NodePtr scale(const NodePtr& a, double s);
NodePtr gelu(const NodePtr& a);
NodePtr matmul(const NodePtr& a, const NodePtr& b);
// y = x W + b, x:(n,din) W:(din,dout) b:(dout) optional
NodePtr linear(const NodePtr& x, const NodePtr& w, const NodePtr& b);
NodePtr layernorm(const NodePtr& x, const NodePtr& gamma, const NodePtr& beta, double eps = 1e-5);
NodePtr reshape(const NodePtr& x, std::vector<int> shape);
NodePtr cols(const NodePtr& x, int start, int width);  // column slice of (n,C)

// ---- attention ----
// q:(Nq,C) k,v:(Nk,C), already projected. Splits C into `heads` contiguous
// slices, computes softmax(q_h k_h^T * scale + R_h) v_h per head and
// re-concatenates. relpos, when nonempty, holds one (Nq,Nk) node per head.
// attn_out, when non-null, receives the (heads,Nq,Nk) softmax weights.
NodePtr multihead_attention(const NodePtr& q, const NodePtr& k, const NodePtr& v, int heads,
                            double scale, const std::vector<NodePtr>& relpos = {},
                            Tensor* attn_out = nullptr);

// Decomposed relative position term for one head.
// qfeat:(Nq,dh) rh,rw:(L,dh) with L = 2*max(extent)-1 covering signed offsets.
// Key coordinates are rescaled into query-grid units; fractional offsets use
// linear interpolation between adjacent table rows. Result tiles over t_k.
NodePtr decomposed_relpos(const NodePtr& qfeat, const NodePtr& rh, const NodePtr& rw, int hq,
                          int wq, int tk, int hk, int wk);

// ---- convolution ----
// x:(Cin,H,W) w:(Cout,Cin,kh,kw) b:(Cout) optional; zero padding
NodePtr conv2d(const NodePtr& x, const NodePtr& w, const NodePtr& b, int stride, int pad);
// x:(T,C,H,W) w:(Co,Ci,kt,kh,kw) b:(Co) optional; stride applies to T only,
// padding 1 on every axis
NodePtr conv3d_temporal(const NodePtr& x, const NodePtr& w, const NodePtr& b, int stride_t);
// x:(Cin,H,W) w:(Cin,Cout,kh,kw) b:(Cout) optional; out = (H-1)*stride - 2*pad + k
NodePtr conv_transpose2d(const NodePtr& x, const NodePtr& w, const NodePtr& b, int stride,
                         int pad);

// ---- layout / resampling ----
NodePtr chw_to_tokens(const NodePtr& x);                  // (C,h,w) -> (h*w,C)
NodePtr tokens_to_chw(const NodePtr& x, int h, int w);    // (h*w,C) -> (C,h,w)
NodePtr tchw_to_tokens(const NodePtr& x);                 // (T,C,h,w) -> (T*h*w,C)
NodePtr stack_frames(const std::vector<NodePtr>& xs);     // n x (C,h,w) -> (n,C,h,w)
NodePtr frame(const NodePtr& x, int t);                   // (T,C,h,w) -> (C,h,w)
NodePtr upsample2x_chw(const NodePtr& x);                 // nearest, (C,h,w)->(C,2h,2w)
NodePtr upsample2x_tokens(const NodePtr& x, int h, int w);// tokens at (h,w) -> (2h*2w,C)
NodePtr bilinear_resize2d(const NodePtr& x, int oh, int ow);  // (h,w), align_corners=false
NodePtr adaptive_avg_pool(const NodePtr& x, int gh, int gw);  // (C,h,w)->(C,gh,gw)

// ---- reductions / losses ----
NodePtr sum_all(const NodePtr& x);
NodePtr mean_all(const NodePtr& x);
// KL heatmap loss: sum over cells with gt>0 of gt*(log gt - logsoftmax(logits)).
// gt is a constant distribution with the same numel as logits.
NodePtr kld_loss(const Tensor& gt, const NodePtr& logits);
// logits:(c), label0 in [0,c)
NodePtr cross_entropy(const NodePtr& logits, int label0);

}  // namespace affground::ag
