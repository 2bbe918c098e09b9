#include "affground/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace affground::ag {

namespace {

NodePtr make_node(Tensor value, std::vector<NodePtr> inputs,
                  std::function<void(const Tensor&, const std::vector<Tensor*>&)> bw) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->inputs = std::move(inputs);
    for (const auto& in : n->inputs)
        if (in->requires_grad) n->requires_grad = true;
    if (n->requires_grad) n->backward = std::move(bw);
    return n;
}

void check_same_shape(const NodePtr& a, const NodePtr& b, const char* op) {
    if (!a->value.same_shape(b->value))
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + a->value.shape_str() +
                                    " vs " + b->value.shape_str());
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

NodePtr constant(Tensor v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    return n;
}

NodePtr leaf(Tensor v, std::string name) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->requires_grad = true;
    n->name = std::move(name);
    return n;
}

GradMap backward(const NodePtr& root, const Tensor* seed) {
    // reverse postorder = consumers before inputs
    std::vector<const Node*> order;
    std::vector<std::pair<const Node*, std::size_t>> stack;
    std::unordered_map<const Node*, bool> visited;
    stack.emplace_back(root.get(), 0);
    visited[root.get()] = true;
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            const Node* in = node->inputs[next++].get();
            if (in->requires_grad && !visited[in]) {
                visited[in] = true;
                stack.emplace_back(in, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    std::reverse(order.begin(), order.end());

    GradMap grads;
    grads[root.get()] = seed ? *seed : Tensor::full(root->value.shape, 1.0);
    if (seed && !seed->same_shape(root->value))
        throw std::invalid_argument("backward seed shape mismatch");

    for (const Node* node : order) {
        if (!node->backward) continue;
        auto it = grads.find(node);
        if (it == grads.end()) continue;
        std::vector<Tensor*> in_grads(node->inputs.size(), nullptr);
        for (std::size_t i = 0; i < node->inputs.size(); ++i) {
            const Node* in = node->inputs[i].get();
            if (!in->requires_grad) continue;
            auto [git, inserted] = grads.try_emplace(in, Tensor::zeros(in->value.shape));
            in_grads[i] = &git->second;
        }
        node->backward(it->second, in_grads);
    }
    return grads;
}

const Tensor* find_grad(const GradMap& grads, const NodePtr& node) {
    auto it = grads.find(node.get());
    return it == grads.end() ? nullptr : &it->second;
}

// ---------------------------------------------------------------- elementwise

NodePtr add(const NodePtr& a, const NodePtr& b) {
    check_same_shape(a, b, "add");
    Tensor out = a->value;
    const double* pb = b->value.ptr();
    double* po = out.ptr();
    for (std::int64_t i = 0; i < out.numel(); ++i) po[i] += pb[i];
    return make_node(std::move(out), {a, b}, [](const Tensor& g, const std::vector<Tensor*>& ig) {
        for (int s = 0; s < 2; ++s) {
            if (!ig[s]) continue;
            double* d = ig[s]->ptr();
            const double* pg = g.ptr();
            for (std::int64_t i = 0; i < g.numel(); ++i) d[i] += pg[i];
        }
    });
}

NodePtr sub(const NodePtr& a, const NodePtr& b) {
    check_same_shape(a, b, "sub");
    Tensor out = a->value;
    const double* pb = b->value.ptr();
    double* po = out.ptr();
    for (std::int64_t i = 0; i < out.numel(); ++i) po[i] -= pb[i];
    return make_node(std::move(out), {a, b}, [](const Tensor& g, const std::vector<Tensor*>& ig) {
        const double* pg = g.ptr();
        if (ig[0]) {
            double* d = ig[0]->ptr();
            for (std::int64_t i = 0; i < g.numel(); ++i) d[i] += pg[i];
        }
        if (ig[1]) {
            double* d = ig[1]->ptr();
            for (std::int64_t i = 0; i < g.numel(); ++i) d[i] -= pg[i];
        }
    });
}

NodePtr mul(const NodePtr& a, const NodePtr& b) {
    check_same_shape(a, b, "mul");
    Tensor out = a->value;
    const double* pb = b->value.ptr();
    double* po = out.ptr();
    for (std::int64_t i = 0; i < out.numel(); ++i) po[i] *= pb[i];
    Tensor av = a->value, bv = b->value;
    return make_node(std::move(out), {a, b},
                     [av, bv](const Tensor& g, const std::vector<Tensor*>& ig) {
                         const double* pg = g.ptr();
                         if (ig[0]) {
                             double* d = ig[0]->ptr();
                             const double* pb2 = bv.ptr();
                             for (std::int64_t i = 0; i < g.numel(); ++i) d[i] += pg[i] * pb2[i];
                         }
                         if (ig[1]) {
                             double* d = ig[1]->ptr();
                             const double* pa2 = av.ptr();
                             for (std::int64_t i = 0; i < g.numel(); ++i) d[i] += pg[i] * pa2[i];
                         }
                     });
}

NodePtr scale(const NodePtr& a, double s) {
    Tensor out = a->value;
    double* po = out.ptr();
    for (std::int64_t i = 0; i < out.numel(); ++i) po[i] *= s;
    return make_node(std::move(out), {a}, [s](const Tensor& g, const std::vector<Tensor*>& ig) {
        if (!ig[0]) return;
        double* d = ig[0]->ptr();
        const double* pg = g.ptr();
        for (std::int64_t i = 0; i < g.numel(); ++i) d[i] += s * pg[i];
    });
}

NodePtr gelu(const NodePtr& a) {
    Tensor out = a->value;
    double* po = out.ptr();
    for (std::int64_t i = 0; i < out.numel(); ++i) {
        double x = po[i];
        po[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
    }
    Tensor av = a->value;
    return make_node(std::move(out), {a}, [av](const Tensor& g, const std::vector<Tensor*>& ig) {
        if (!ig[0]) return;
        double* d = ig[0]->ptr();
        const double* pg = g.ptr();
        const double* px = av.ptr();
        for (std::int64_t i = 0; i < g.numel(); ++i) {
            double x = px[i];
            double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
            double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
            d[i] += pg[i] * (cdf + x * pdf);
        }
    });
}

// ------------------------------------------------------------- linear algebra

namespace {
// c (m,n) += a (m,k) * b (k,n)
void matmul_acc(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* ar = a + static_cast<std::size_t>(i) * k;
        double* cr = c + static_cast<std::size_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            double av = ar[kk];
            if (av == 0.0) continue;
            const double* br = b + static_cast<std::size_t>(kk) * n;
            for (int j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}
// c (m,n) += a (m,k) * b^T where b is (n,k)
void matmul_bt_acc(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* ar = a + static_cast<std::size_t>(i) * k;
        double* cr = c + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* br = b + static_cast<std::size_t>(j) * k;
            double acc = 0.0;
            for (int kk = 0; kk < k; ++kk) acc += ar[kk] * br[kk];
            cr[j] += acc;
        }
    }
}
// c (k,n) += a^T * b where a is (m,k), b is (m,n)
void matmul_at_acc(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* ar = a + static_cast<std::size_t>(i) * k;
        const double* br = b + static_cast<std::size_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            double av = ar[kk];
            if (av == 0.0) continue;
            double* cr = c + static_cast<std::size_t>(kk) * n;
            for (int j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}
}  // namespace

NodePtr matmul(const NodePtr& a, const NodePtr& b) {
    if (a->value.ndim() != 2 || b->value.ndim() != 2 || a->value.dim(1) != b->value.dim(0))
        throw std::invalid_argument("matmul: incompatible shapes " + a->value.shape_str() + " x " +
                                    b->value.shape_str());
    int m = a->value.dim(0), k = a->value.dim(1), n = b->value.dim(1);
    Tensor out({m, n});
    matmul_acc(a->value.ptr(), b->value.ptr(), out.ptr(), m, k, n);
    Tensor av = a->value, bv = b->value;
    return make_node(std::move(out), {a, b},
                     [av, bv, m, k, n](const Tensor& g, const std::vector<Tensor*>& ig) {
                         if (ig[0]) matmul_bt_acc(g.ptr(), bv.ptr(), ig[0]->ptr(), m, n, k);
                         if (ig[1]) matmul_at_acc(av.ptr(), g.ptr(), ig[1]->ptr(), m, k, n);
                     });
}

NodePtr linear(const NodePtr& x, const NodePtr& w, const NodePtr& b) {
    if (x->value.ndim() != 2 || w->value.ndim() != 2 || x->value.dim(1) != w->value.dim(0))
        throw std::invalid_argument("linear: incompatible shapes");
    int n = x->value.dim(0), din = x->value.dim(1), dout = w->value.dim(1);
    Tensor out({n, dout});
    if (b) {
        if (b->value.numel() != dout) throw std::invalid_argument("linear: bias size mismatch");
        double* po = out.ptr();
        const double* pb = b->value.ptr();
        for (int i = 0; i < n; ++i)
            std::memcpy(po + static_cast<std::size_t>(i) * dout, pb, sizeof(double) * dout);
    }
    matmul_acc(x->value.ptr(), w->value.ptr(), out.ptr(), n, din, dout);
    Tensor xv = x->value, wv = w->value;
    std::vector<NodePtr> ins = b ? std::vector<NodePtr>{x, w, b} : std::vector<NodePtr>{x, w};
    return make_node(std::move(out), std::move(ins),
                     [xv, wv, n, din, dout](const Tensor& g, const std::vector<Tensor*>& ig) {
                         if (ig[0]) matmul_bt_acc(g.ptr(), wv.ptr(), ig[0]->ptr(), n, dout, din);
                         if (ig[1]) matmul_at_acc(xv.ptr(), g.ptr(), ig[1]->ptr(), n, din, dout);
                         if (ig.size() > 2 && ig[2]) {
                             double* db = ig[2]->ptr();
                             const double* pg = g.ptr();
                             for (int i = 0; i < n; ++i)
                                 for (int j = 0; j < dout; ++j)
                                     db[j] += pg[static_cast<std::size_t>(i) * dout + j];
                         }
                     });
}

NodePtr layernorm(const NodePtr& x, const NodePtr& gamma, const NodePtr& beta, double eps) {
    if (x->value.ndim() != 2) throw std::invalid_argument("layernorm: expects (n,d)");
    int n = x->value.dim(0), d = x->value.dim(1);
    if (gamma->value.numel() != d || beta->value.numel() != d)
        throw std::invalid_argument("layernorm: gamma/beta size mismatch");
    Tensor out({n, d});
    Tensor xhat({n, d});
    Tensor inv_std({n});
    const double* px = x->value.ptr();
    const double* pgm = gamma->value.ptr();
    const double* pbt = beta->value.ptr();
    double* po = out.ptr();
    double* ph = xhat.ptr();
    for (int i = 0; i < n; ++i) {
        const double* row = px + static_cast<std::size_t>(i) * d;
        double mean = 0.0;
        for (int j = 0; j < d; ++j) mean += row[j];
        mean /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            double c = row[j] - mean;
            var += c * c;
        }
        var /= d;
        double is = 1.0 / std::sqrt(var + eps);
        inv_std.data[static_cast<std::size_t>(i)] = is;
        double* hrow = ph + static_cast<std::size_t>(i) * d;
        double* orow = po + static_cast<std::size_t>(i) * d;
        for (int j = 0; j < d; ++j) {
            hrow[j] = (row[j] - mean) * is;
            orow[j] = hrow[j] * pgm[j] + pbt[j];
        }
    }
    Tensor gm = gamma->value;
    return make_node(
        std::move(out), {x, gamma, beta},
        [xhat, inv_std, gm, n, d](const Tensor& g, const std::vector<Tensor*>& ig) {
            const double* pg = g.ptr();
            const double* ph2 = xhat.ptr();
            const double* pgm2 = gm.ptr();
            for (int i = 0; i < n; ++i) {
                const double* grow = pg + static_cast<std::size_t>(i) * d;
                const double* hrow = ph2 + static_cast<std::size_t>(i) * d;
                if (ig[0]) {
                    // dx = (is/d) * (d*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat))
                    double sum_dh = 0.0, sum_dh_h = 0.0;
                    for (int j = 0; j < d; ++j) {
                        double dh = grow[j] * pgm2[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hrow[j];
                    }
                    double is = inv_std.data[static_cast<std::size_t>(i)];
                    double* dxrow = ig[0]->ptr() + static_cast<std::size_t>(i) * d;
                    for (int j = 0; j < d; ++j) {
                        double dh = grow[j] * pgm2[j];
                        dxrow[j] += is * (dh - sum_dh / d - hrow[j] * sum_dh_h / d);
                    }
                }
                if (ig[1]) {
                    double* dg = ig[1]->ptr();
                    for (int j = 0; j < d; ++j) dg[j] += grow[j] * hrow[j];
                }
                if (ig[2]) {
                    double* db = ig[2]->ptr();
                    for (int j = 0; j < d; ++j) db[j] += grow[j];
                }
            }
        });
}

NodePtr reshape(const NodePtr& x, std::vector<int> shape) {
    Tensor out = x->value.reshaped(shape);
    std::vector<int> old_shape = x->value.shape;
    return make_node(std::move(out), {x},
                     [old_shape](const Tensor& g, const std::vector<Tensor*>& ig) {
                         if (!ig[0]) return;
                         double* d = ig[0]->ptr();
                         const double* pg = g.ptr();
                         for (std::int64_t i = 0; i < g.numel(); ++i) d[i] += pg[i];
                     });
}

NodePtr cols(const NodePtr& x, int start, int width) {
    if (x->value.ndim() != 2) throw std::invalid_argument("cols: expects (n,C)");
    int n = x->value.dim(0), c = x->value.dim(1);
    if (start < 0 || start + width > c) throw std::invalid_argument("cols: range out of bounds");
    Tensor out({n, width});
    const double* px = x->value.ptr();
    double* po = out.ptr();
    for (int i = 0; i < n; ++i)
        std::memcpy(po + static_cast<std::size_t>(i) * width,
                    px + static_cast<std::size_t>(i) * c + start, sizeof(double) * width);
    return make_node(std::move(out), {x},
                     [n, c, start, width](const Tensor& g, const std::vector<Tensor*>& ig) {
                         if (!ig[0]) return;
                         double* d = ig[0]->ptr();
                         const double* pg = g.ptr();
                         for (int i = 0; i < n; ++i)
                             for (int j = 0; j < width; ++j)
                                 d[static_cast<std::size_t>(i) * c + start + j] +=
                                     pg[static_cast<std::size_t>(i) * width + j];
                     });
}

// ----------------------------------------------------------------- attention

NodePtr multihead_attention(const NodePtr& q, const NodePtr& k, const NodePtr& v, int heads,
                            double scale, const std::vector<NodePtr>& relpos, Tensor* attn_out) {
    if (q->value.ndim() != 2 || k->value.ndim() != 2 || v->value.ndim() != 2)
        throw std::invalid_argument("attention: expects 2-D token matrices");
    int nq = q->value.dim(0), c = q->value.dim(1);
    int nk = k->value.dim(0);
    if (k->value.dim(1) != c || v->value.dim(1) != c)
        throw std::invalid_argument("attention: channel mismatch");
    if (v->value.dim(0) != nk) throw std::invalid_argument("attention: key/value length mismatch");
    if (heads < 1 || c % heads != 0) throw std::invalid_argument("attention: invalid head count");
    if (!relpos.empty() && static_cast<int>(relpos.size()) != heads)
        throw std::invalid_argument("attention: relpos per-head count mismatch");
    int dh = c / heads;

    auto attn = std::make_shared<Tensor>(Tensor({heads, nq, nk}));
    Tensor out({nq, c});
    const double* pq = q->value.ptr();
    const double* pk = k->value.ptr();
    const double* pv = v->value.ptr();
    double* po = out.ptr();
    for (int h = 0; h < heads; ++h) {
        const double* pr = relpos.empty() ? nullptr : relpos[h]->value.ptr();
        if (pr && (relpos[h]->value.dim(0) != nq || relpos[h]->value.dim(1) != nk))
            throw std::invalid_argument("attention: relpos shape mismatch");
        double* pa = attn->ptr() + static_cast<std::size_t>(h) * nq * nk;
        for (int i = 0; i < nq; ++i) {
            const double* qrow = pq + static_cast<std::size_t>(i) * c + h * dh;
            double* arow = pa + static_cast<std::size_t>(i) * nk;
            double mx = -1e300;
            for (int j = 0; j < nk; ++j) {
                const double* krow = pk + static_cast<std::size_t>(j) * c + h * dh;
                double s = 0.0;
                for (int d = 0; d < dh; ++d) s += qrow[d] * krow[d];
                s *= scale;
                if (pr) s += pr[static_cast<std::size_t>(i) * nk + j];
                arow[j] = s;
                if (s > mx) mx = s;
            }
            double denom = 0.0;
            for (int j = 0; j < nk; ++j) {
                arow[j] = std::exp(arow[j] - mx);
                denom += arow[j];
            }
            double inv = 1.0 / denom;
            double* orow = po + static_cast<std::size_t>(i) * c + h * dh;
            for (int j = 0; j < nk; ++j) {
                arow[j] *= inv;
                const double* vrow = pv + static_cast<std::size_t>(j) * c + h * dh;
                double a = arow[j];
                for (int d = 0; d < dh; ++d) orow[d] += a * vrow[d];
            }
        }
    }
    if (attn_out) *attn_out = *attn;

    Tensor qv = q->value, kv = k->value, vv = v->value;
    std::vector<NodePtr> ins{q, k, v};
    for (const auto& r : relpos) ins.push_back(r);
    bool has_r = !relpos.empty();
    return make_node(
        std::move(out), std::move(ins),
        [attn, qv, kv, vv, heads, dh, nq, nk, scale, has_r](const Tensor& g,
                                                            const std::vector<Tensor*>& ig) {
            int c = heads * dh;
            std::vector<double> da(static_cast<std::size_t>(nq) * nk);
            std::vector<double> ds(static_cast<std::size_t>(nq) * nk);
            for (int h = 0; h < heads; ++h) {
                const double* pa = attn->ptr() + static_cast<std::size_t>(h) * nq * nk;
                // dV and dA
                for (int i = 0; i < nq; ++i) {
                    const double* grow = g.ptr() + static_cast<std::size_t>(i) * c + h * dh;
                    const double* arow = pa + static_cast<std::size_t>(i) * nk;
                    double* darow = da.data() + static_cast<std::size_t>(i) * nk;
                    for (int j = 0; j < nk; ++j) {
                        const double* vrow = vv.ptr() + static_cast<std::size_t>(j) * c + h * dh;
                        double acc = 0.0;
                        for (int d = 0; d < dh; ++d) acc += grow[d] * vrow[d];
                        darow[j] = acc;
                        if (ig[2]) {
                            double* dvrow =
                                ig[2]->ptr() + static_cast<std::size_t>(j) * c + h * dh;
                            double a = arow[j];
                            for (int d = 0; d < dh; ++d) dvrow[d] += a * grow[d];
                        }
                    }
                }
                // softmax backward: dS = A * (dA - sum(dA*A))
                for (int i = 0; i < nq; ++i) {
                    const double* arow = pa + static_cast<std::size_t>(i) * nk;
                    const double* darow = da.data() + static_cast<std::size_t>(i) * nk;
                    double* dsrow = ds.data() + static_cast<std::size_t>(i) * nk;
                    double dot = 0.0;
                    for (int j = 0; j < nk; ++j) dot += darow[j] * arow[j];
                    for (int j = 0; j < nk; ++j) dsrow[j] = arow[j] * (darow[j] - dot);
                }
                // dR (per-head inputs start at index 3)
                if (has_r && ig[3 + h]) {
                    double* dr = ig[3 + h]->ptr();
                    for (std::size_t i = 0; i < ds.size(); ++i) dr[i] += ds[i];
                }
                // dQ, dK
                for (int i = 0; i < nq; ++i) {
                    const double* dsrow = ds.data() + static_cast<std::size_t>(i) * nk;
                    const double* qrow = qv.ptr() + static_cast<std::size_t>(i) * c + h * dh;
                    double* dqrow =
                        ig[0] ? ig[0]->ptr() + static_cast<std::size_t>(i) * c + h * dh : nullptr;
                    for (int j = 0; j < nk; ++j) {
                        double sv = dsrow[j] * scale;
                        if (sv == 0.0) continue;
                        const double* krow = kv.ptr() + static_cast<std::size_t>(j) * c + h * dh;
                        if (dqrow)
                            for (int d = 0; d < dh; ++d) dqrow[d] += sv * krow[d];
                        if (ig[1]) {
                            double* dkrow =
                                ig[1]->ptr() + static_cast<std::size_t>(j) * c + h * dh;
                            for (int d = 0; d < dh; ++d) dkrow[d] += sv * qrow[d];
                        }
                    }
                }
            }
        });
}

NodePtr decomposed_relpos(const NodePtr& qfeat, const NodePtr& rh, const NodePtr& rw, int hq,
                          int wq, int tk, int hk, int wk) {
    if (qfeat->value.ndim() != 2 || qfeat->value.dim(0) != hq * wq)
        throw std::invalid_argument("relpos: qfeat shape mismatch");
    int dh = qfeat->value.dim(1);
    if (rh->value.ndim() != 2 || rw->value.ndim() != 2 || rh->value.dim(1) != dh ||
        rw->value.dim(1) != dh)
        throw std::invalid_argument("relpos: table dim mismatch");
    int lh = rh->value.dim(0), lw = rw->value.dim(0);
    if (lh % 2 == 0 || lw % 2 == 0) throw std::invalid_argument("relpos: table length must be odd");

    // offset tables: key coordinates rescaled into query-grid units, linear
    // interpolation between adjacent rows at fractional offsets
    struct Lookup {
        int i0, i1;
        double f;  // weight on i1
    };
    auto build = [](int nq, int nk, int len, const char* axis) {
        std::vector<Lookup> lut(static_cast<std::size_t>(nq) * nk);
        int center = (len - 1) / 2;
        double ratio = static_cast<double>(nq) / nk;
        for (int a = 0; a < nq; ++a)
            for (int b = 0; b < nk; ++b) {
                double idx = (a - b * ratio) + center;
                if (idx < -1e-9 || idx > len - 1 + 1e-9)
                    throw std::out_of_range(std::string("relpos offset outside table range (") +
                                            axis + ")");
                idx = std::clamp(idx, 0.0, static_cast<double>(len - 1));
                int i0 = static_cast<int>(std::floor(idx));
                double f = idx - i0;
                int i1 = i0 + 1;
                if (i1 > len - 1) {
                    i1 = len - 1;
                    f = 0.0;
                }
                lut[static_cast<std::size_t>(a) * nk + b] = {i0, i1, f};
            }
        return lut;
    };
    auto luty = std::make_shared<std::vector<Lookup>>(build(hq, hk, lh, "h"));
    auto lutx = std::make_shared<std::vector<Lookup>>(build(wq, wk, lw, "w"));

    int nq = hq * wq;
    int nk_spatial = hk * wk;
    int nk = tk * nk_spatial;
    Tensor out({nq, nk});
    const double* pq = qfeat->value.ptr();
    const double* ph = rh->value.ptr();
    const double* pw = rw->value.ptr();
    double* po = out.ptr();
    // per (query, spatial key) term, tiled across the temporal axis
    std::vector<double> spatial(static_cast<std::size_t>(nq) * nk_spatial);
    for (int qy = 0; qy < hq; ++qy)
        for (int qx = 0; qx < wq; ++qx) {
            int qi = qy * wq + qx;
            const double* qrow = pq + static_cast<std::size_t>(qi) * dh;
            for (int ky = 0; ky < hk; ++ky) {
                const Lookup& ly = (*luty)[static_cast<std::size_t>(qy) * hk + ky];
                double hterm0 = 0.0, hterm1 = 0.0;
                {
                    const double* r0 = ph + static_cast<std::size_t>(ly.i0) * dh;
                    const double* r1 = ph + static_cast<std::size_t>(ly.i1) * dh;
                    for (int d = 0; d < dh; ++d) {
                        hterm0 += qrow[d] * r0[d];
                        hterm1 += qrow[d] * r1[d];
                    }
                }
                double hterm = (1.0 - ly.f) * hterm0 + ly.f * hterm1;
                for (int kx = 0; kx < wk; ++kx) {
                    const Lookup& lx = (*lutx)[static_cast<std::size_t>(qx) * wk + kx];
                    const double* r0 = pw + static_cast<std::size_t>(lx.i0) * dh;
                    const double* r1 = pw + static_cast<std::size_t>(lx.i1) * dh;
                    double w0 = 0.0, w1 = 0.0;
                    for (int d = 0; d < dh; ++d) {
                        w0 += qrow[d] * r0[d];
                        w1 += qrow[d] * r1[d];
                    }
                    spatial[static_cast<std::size_t>(qi) * nk_spatial + ky * wk + kx] =
                        hterm + (1.0 - lx.f) * w0 + lx.f * w1;
                }
            }
        }
    for (int qi = 0; qi < nq; ++qi) {
        const double* srow = spatial.data() + static_cast<std::size_t>(qi) * nk_spatial;
        double* orow = po + static_cast<std::size_t>(qi) * nk;
        for (int t = 0; t < tk; ++t)
            std::memcpy(orow + static_cast<std::size_t>(t) * nk_spatial, srow,
                        sizeof(double) * nk_spatial);
    }

    Tensor qv = qfeat->value, rhv = rh->value, rwv = rw->value;
    return make_node(
        std::move(out), {qfeat, rh, rw},
        [luty, lutx, qv, rhv, rwv, hq, wq, tk, hk, wk, dh](const Tensor& g,
                                                           const std::vector<Tensor*>& ig) {
            int nk_spatial = hk * wk;
            int nk = tk * nk_spatial;
            // collapse the tiled temporal axis
            std::vector<double> gs(static_cast<std::size_t>(hq * wq) * nk_spatial, 0.0);
            for (int qi = 0; qi < hq * wq; ++qi) {
                const double* grow = g.ptr() + static_cast<std::size_t>(qi) * nk;
                double* gsrow = gs.data() + static_cast<std::size_t>(qi) * nk_spatial;
                for (int t = 0; t < tk; ++t) {
                    const double* gt = grow + static_cast<std::size_t>(t) * nk_spatial;
                    for (int s = 0; s < nk_spatial; ++s) gsrow[s] += gt[s];
                }
            }
            for (int qy = 0; qy < hq; ++qy)
                for (int qx = 0; qx < wq; ++qx) {
                    int qi = qy * wq + qx;
                    const double* qrow = qv.ptr() + static_cast<std::size_t>(qi) * dh;
                    const double* gsrow = gs.data() + static_cast<std::size_t>(qi) * nk_spatial;
                    double* dq = ig[0] ? ig[0]->ptr() + static_cast<std::size_t>(qi) * dh : nullptr;
                    for (int ky = 0; ky < hk; ++ky) {
                        const auto& ly = (*luty)[static_cast<std::size_t>(qy) * hk + ky];
                        double grow_sum = 0.0;
                        for (int kx = 0; kx < wk; ++kx) grow_sum += gsrow[ky * wk + kx];
                        if (ig[1] && grow_sum != 0.0) {
                            double* d0 = ig[1]->ptr() + static_cast<std::size_t>(ly.i0) * dh;
                            double* d1 = ig[1]->ptr() + static_cast<std::size_t>(ly.i1) * dh;
                            for (int d = 0; d < dh; ++d) {
                                d0[d] += (1.0 - ly.f) * grow_sum * qrow[d];
                                d1[d] += ly.f * grow_sum * qrow[d];
                            }
                        }
                        if (dq && grow_sum != 0.0) {
                            const double* r0 = rhv.ptr() + static_cast<std::size_t>(ly.i0) * dh;
                            const double* r1 = rhv.ptr() + static_cast<std::size_t>(ly.i1) * dh;
                            for (int d = 0; d < dh; ++d)
                                dq[d] += grow_sum * ((1.0 - ly.f) * r0[d] + ly.f * r1[d]);
                        }
                        for (int kx = 0; kx < wk; ++kx) {
                            double gv = gsrow[ky * wk + kx];
                            if (gv == 0.0) continue;
                            const auto& lx = (*lutx)[static_cast<std::size_t>(qx) * wk + kx];
                            if (ig[2]) {
                                double* d0 = ig[2]->ptr() + static_cast<std::size_t>(lx.i0) * dh;
                                double* d1 = ig[2]->ptr() + static_cast<std::size_t>(lx.i1) * dh;
                                for (int d = 0; d < dh; ++d) {
                                    d0[d] += (1.0 - lx.f) * gv * qrow[d];
                                    d1[d] += lx.f * gv * qrow[d];
                                }
                            }
                            if (dq) {
                                const double* r0 =
                                    rwv.ptr() + static_cast<std::size_t>(lx.i0) * dh;
                                const double* r1 =
                                    rwv.ptr() + static_cast<std::size_t>(lx.i1) * dh;
                                for (int d = 0; d < dh; ++d)
                                    dq[d] += gv * ((1.0 - lx.f) * r0[d] + lx.f * r1[d]);
                            }
                        }
                    }
                }
        });
}

// --------------------------------------------------------------- convolutions

NodePtr conv2d(const NodePtr& x, const NodePtr& w, const NodePtr& b, int stride, int pad) {
    if (x->value.ndim() != 3 || w->value.ndim() != 4)
        throw std::invalid_argument("conv2d: expects x(C,H,W), w(Co,Ci,kh,kw)");
    int ci = x->value.dim(0), hh = x->value.dim(1), ww = x->value.dim(2);
    int co = w->value.dim(0), kh = w->value.dim(2), kw = w->value.dim(3);
    if (w->value.dim(1) != ci) throw std::invalid_argument("conv2d: channel mismatch");
    int ho = (hh + 2 * pad - kh) / stride + 1;
    int wo = (ww + 2 * pad - kw) / stride + 1;
    if (ho < 1 || wo < 1) throw std::invalid_argument("conv2d: output would be empty");
    Tensor out({co, ho, wo});
    double* po = out.ptr();
    if (b) {
        const double* pb = b->value.ptr();
        for (int oc = 0; oc < co; ++oc) {
            double bv = pb[oc];
            double* plane = po + static_cast<std::size_t>(oc) * ho * wo;
            for (int i = 0; i < ho * wo; ++i) plane[i] = bv;
        }
    }
    const double* px = x->value.ptr();
    const double* pw = w->value.ptr();
    for (int oc = 0; oc < co; ++oc) {
        double* oplane = po + static_cast<std::size_t>(oc) * ho * wo;
        for (int ic = 0; ic < ci; ++ic) {
            const double* xplane = px + static_cast<std::size_t>(ic) * hh * ww;
            const double* wbase =
                pw + (static_cast<std::size_t>(oc) * ci + ic) * kh * kw;
            for (int a = 0; a < kh; ++a)
                for (int bb = 0; bb < kw; ++bb) {
                    double wv = wbase[a * kw + bb];
                    if (wv == 0.0) continue;
                    for (int oy = 0; oy < ho; ++oy) {
                        int iy = oy * stride - pad + a;
                        if (iy < 0 || iy >= hh) continue;
                        double* orow = oplane + static_cast<std::size_t>(oy) * wo;
                        const double* xrow = xplane + static_cast<std::size_t>(iy) * ww;
                        for (int ox = 0; ox < wo; ++ox) {
                            int ix = ox * stride - pad + bb;
                            if (ix < 0 || ix >= ww) continue;
                            orow[ox] += wv * xrow[ix];
                        }
                    }
                }
        }
    }
    Tensor xv = x->value, wv = w->value;
    std::vector<NodePtr> ins = b ? std::vector<NodePtr>{x, w, b} : std::vector<NodePtr>{x, w};
    return make_node(
        std::move(out), std::move(ins),
        [xv, wv, ci, hh, ww, co, kh, kw, ho, wo, stride, pad](const Tensor& g,
                                                              const std::vector<Tensor*>& ig) {
            const double* pg = g.ptr();
            for (int oc = 0; oc < co; ++oc) {
                const double* gplane = pg + static_cast<std::size_t>(oc) * ho * wo;
                for (int ic = 0; ic < ci; ++ic) {
                    const double* xplane = xv.ptr() + static_cast<std::size_t>(ic) * hh * ww;
                    double* dxplane =
                        ig[0] ? ig[0]->ptr() + static_cast<std::size_t>(ic) * hh * ww : nullptr;
                    const double* wbase =
                        wv.ptr() + (static_cast<std::size_t>(oc) * ci + ic) * kh * kw;
                    double* dwbase =
                        ig[1] ? ig[1]->ptr() + (static_cast<std::size_t>(oc) * ci + ic) * kh * kw
                              : nullptr;
                    for (int a = 0; a < kh; ++a)
                        for (int bb = 0; bb < kw; ++bb) {
                            double wval = wbase[a * kw + bb];
                            double dw_acc = 0.0;
                            for (int oy = 0; oy < ho; ++oy) {
                                int iy = oy * stride - pad + a;
                                if (iy < 0 || iy >= hh) continue;
                                const double* grow = gplane + static_cast<std::size_t>(oy) * wo;
                                const double* xrow = xplane + static_cast<std::size_t>(iy) * ww;
                                double* dxrow =
                                    dxplane ? dxplane + static_cast<std::size_t>(iy) * ww
                                            : nullptr;
                                for (int ox = 0; ox < wo; ++ox) {
                                    int ix = ox * stride - pad + bb;
                                    if (ix < 0 || ix >= ww) continue;
                                    double gv = grow[ox];
                                    if (dxrow) dxrow[ix] += wval * gv;
                                    dw_acc += gv * xrow[ix];
                                }
                            }
                            if (dwbase) dwbase[a * kw + bb] += dw_acc;
                        }
                }
                if (ig.size() > 2 && ig[2]) {
                    double acc = 0.0;
                    for (int i = 0; i < ho * wo; ++i) acc += gplane[i];
                    ig[2]->ptr()[oc] += acc;
                }
            }
        });
}

NodePtr conv3d_temporal(const NodePtr& x, const NodePtr& w, const NodePtr& b, int stride_t) {
    if (x->value.ndim() != 4 || w->value.ndim() != 5)
        throw std::invalid_argument("conv3d: expects x(T,C,H,W), w(Co,Ci,kt,kh,kw)");
    int tt = x->value.dim(0), ci = x->value.dim(1), hh = x->value.dim(2), ww = x->value.dim(3);
    int co = w->value.dim(0), kt = w->value.dim(2), kh = w->value.dim(3), kw = w->value.dim(4);
    if (w->value.dim(1) != ci) throw std::invalid_argument("conv3d: channel mismatch");
    const int pad = 1;
    int to = (tt + 2 * pad - kt) / stride_t + 1;
    Tensor out({to, co, hh, ww});
    double* po = out.ptr();
    if (b) {
        const double* pb = b->value.ptr();
        for (int ot = 0; ot < to; ++ot)
            for (int oc = 0; oc < co; ++oc) {
                double* plane = po + (static_cast<std::size_t>(ot) * co + oc) * hh * ww;
                for (int i = 0; i < hh * ww; ++i) plane[i] = pb[oc];
            }
    }
    const double* px = x->value.ptr();
    const double* pw = w->value.ptr();
    for (int ot = 0; ot < to; ++ot)
        for (int at = 0; at < kt; ++at) {
            int it = ot * stride_t - pad + at;
            if (it < 0 || it >= tt) continue;
            for (int oc = 0; oc < co; ++oc) {
                double* oplane = po + (static_cast<std::size_t>(ot) * co + oc) * hh * ww;
                for (int ic = 0; ic < ci; ++ic) {
                    const double* xplane =
                        px + (static_cast<std::size_t>(it) * ci + ic) * hh * ww;
                    const double* wbase =
                        pw + ((static_cast<std::size_t>(oc) * ci + ic) * kt + at) * kh * kw;
                    for (int a = 0; a < kh; ++a)
                        for (int bb = 0; bb < kw; ++bb) {
                            double wval = wbase[a * kw + bb];
                            if (wval == 0.0) continue;
                            for (int oy = 0; oy < hh; ++oy) {
                                int iy = oy - pad + a;
                                if (iy < 0 || iy >= hh) continue;
                                double* orow = oplane + static_cast<std::size_t>(oy) * ww;
                                const double* xrow = xplane + static_cast<std::size_t>(iy) * ww;
                                for (int ox = 0; ox < ww; ++ox) {
                                    int ix = ox - pad + bb;
                                    if (ix < 0 || ix >= ww) continue;
                                    orow[ox] += wval * xrow[ix];
                                }
                            }
                        }
                }
            }
        }
    Tensor xv = x->value, wv = w->value;
    std::vector<NodePtr> ins = b ? std::vector<NodePtr>{x, w, b} : std::vector<NodePtr>{x, w};
    return make_node(
        std::move(out), std::move(ins),
        [xv, wv, tt, ci, hh, ww, co, kt, kh, kw, to, stride_t](const Tensor& g,
                                                               const std::vector<Tensor*>& ig) {
            const int pad = 1;
            const double* pg = g.ptr();
            for (int ot = 0; ot < to; ++ot)
                for (int at = 0; at < kt; ++at) {
                    int it = ot * stride_t - pad + at;
                    if (it < 0 || it >= tt) continue;
                    for (int oc = 0; oc < co; ++oc) {
                        const double* gplane =
                            pg + (static_cast<std::size_t>(ot) * co + oc) * hh * ww;
                        for (int ic = 0; ic < ci; ++ic) {
                            const double* xplane =
                                xv.ptr() + (static_cast<std::size_t>(it) * ci + ic) * hh * ww;
                            double* dxplane =
                                ig[0] ? ig[0]->ptr() +
                                            (static_cast<std::size_t>(it) * ci + ic) * hh * ww
                                      : nullptr;
                            const double* wbase =
                                wv.ptr() +
                                ((static_cast<std::size_t>(oc) * ci + ic) * kt + at) * kh * kw;
                            double* dwbase =
                                ig[1] ? ig[1]->ptr() +
                                            ((static_cast<std::size_t>(oc) * ci + ic) * kt + at) *
                                                kh * kw
                                      : nullptr;
                            for (int a = 0; a < kh; ++a)
                                for (int bb = 0; bb < kw; ++bb) {
                                    double wval = wbase[a * kw + bb];
                                    double dw_acc = 0.0;
                                    for (int oy = 0; oy < hh; ++oy) {
                                        int iy = oy - pad + a;
                                        if (iy < 0 || iy >= hh) continue;
                                        const double* grow =
                                            gplane + static_cast<std::size_t>(oy) * ww;
                                        const double* xrow =
                                            xplane + static_cast<std::size_t>(iy) * ww;
                                        double* dxrow =
                                            dxplane ? dxplane + static_cast<std::size_t>(iy) * ww
                                                    : nullptr;
                                        for (int ox = 0; ox < ww; ++ox) {
                                            int ix = ox - pad + bb;
                                            if (ix < 0 || ix >= ww) continue;
                                            double gv = grow[ox];
                                            if (dxrow) dxrow[ix] += wval * gv;
                                            dw_acc += gv * xrow[ix];
                                        }
                                    }
                                    if (dwbase) dwbase[a * kw + bb] += dw_acc;
                                }
                        }
                    }
                }
            if (ig.size() > 2 && ig[2]) {
                for (int ot = 0; ot < to; ++ot)
                    for (int oc = 0; oc < co; ++oc) {
                        const double* gplane =
                            pg + (static_cast<std::size_t>(ot) * co + oc) * hh * ww;
                        double acc = 0.0;
                        for (int i = 0; i < hh * ww; ++i) acc += gplane[i];
                        ig[2]->ptr()[oc] += acc;
                    }
            }
        });
}

NodePtr conv_transpose2d(const NodePtr& x, const NodePtr& w, const NodePtr& b, int stride,
                         int pad) {
    if (x->value.ndim() != 3 || w->value.ndim() != 4)
        throw std::invalid_argument("deconv: expects x(Ci,H,W), w(Ci,Co,kh,kw)");
    int ci = x->value.dim(0), hh = x->value.dim(1), ww = x->value.dim(2);
    int co = w->value.dim(1), kh = w->value.dim(2), kw = w->value.dim(3);
    if (w->value.dim(0) != ci) throw std::invalid_argument("deconv: channel mismatch");
    int ho = (hh - 1) * stride - 2 * pad + kh;
    int wo = (ww - 1) * stride - 2 * pad + kw;
    if (ho < 1 || wo < 1) throw std::invalid_argument("deconv: output would be empty");
    Tensor out({co, ho, wo});
    double* po = out.ptr();
    if (b) {
        const double* pb = b->value.ptr();
        for (int oc = 0; oc < co; ++oc) {
            double* plane = po + static_cast<std::size_t>(oc) * ho * wo;
            for (int i = 0; i < ho * wo; ++i) plane[i] = pb[oc];
        }
    }
    const double* px = x->value.ptr();
    const double* pw = w->value.ptr();
    for (int ic = 0; ic < ci; ++ic) {
        const double* xplane = px + static_cast<std::size_t>(ic) * hh * ww;
        for (int oc = 0; oc < co; ++oc) {
            double* oplane = po + static_cast<std::size_t>(oc) * ho * wo;
            const double* wbase = pw + (static_cast<std::size_t>(ic) * co + oc) * kh * kw;
            for (int a = 0; a < kh; ++a)
                for (int bb = 0; bb < kw; ++bb) {
                    double wval = wbase[a * kw + bb];
                    if (wval == 0.0) continue;
                    for (int iy = 0; iy < hh; ++iy) {
                        int oy = iy * stride - pad + a;
                        if (oy < 0 || oy >= ho) continue;
                        const double* xrow = xplane + static_cast<std::size_t>(iy) * ww;
                        double* orow = oplane + static_cast<std::size_t>(oy) * wo;
                        for (int ix = 0; ix < ww; ++ix) {
                            int ox = ix * stride - pad + bb;
                            if (ox < 0 || ox >= wo) continue;
                            orow[ox] += wval * xrow[ix];
                        }
                    }
                }
        }
    }
    Tensor xv = x->value, wv = w->value;
    std::vector<NodePtr> ins = b ? std::vector<NodePtr>{x, w, b} : std::vector<NodePtr>{x, w};
    return make_node(
        std::move(out), std::move(ins),
        [xv, wv, ci, hh, ww, co, kh, kw, ho, wo, stride, pad](const Tensor& g,
                                                              const std::vector<Tensor*>& ig) {
            const double* pg = g.ptr();
            for (int ic = 0; ic < ci; ++ic) {
                const double* xplane = xv.ptr() + static_cast<std::size_t>(ic) * hh * ww;
                double* dxplane =
                    ig[0] ? ig[0]->ptr() + static_cast<std::size_t>(ic) * hh * ww : nullptr;
                for (int oc = 0; oc < co; ++oc) {
                    const double* gplane = pg + static_cast<std::size_t>(oc) * ho * wo;
                    const double* wbase =
                        wv.ptr() + (static_cast<std::size_t>(ic) * co + oc) * kh * kw;
                    double* dwbase =
                        ig[1] ? ig[1]->ptr() + (static_cast<std::size_t>(ic) * co + oc) * kh * kw
                              : nullptr;
                    for (int a = 0; a < kh; ++a)
                        for (int bb = 0; bb < kw; ++bb) {
                            double wval = wbase[a * kw + bb];
                            double dw_acc = 0.0;
                            for (int iy = 0; iy < hh; ++iy) {
                                int oy = iy * stride - pad + a;
                                if (oy < 0 || oy >= ho) continue;
                                const double* grow = gplane + static_cast<std::size_t>(oy) * wo;
                                const double* xrow = xplane + static_cast<std::size_t>(iy) * ww;
                                double* dxrow =
                                    dxplane ? dxplane + static_cast<std::size_t>(iy) * ww
                                            : nullptr;
                                for (int ix = 0; ix < ww; ++ix) {
                                    int ox = ix * stride - pad + bb;
                                    if (ox < 0 || ox >= wo) continue;
                                    double gv = grow[ox];
                                    if (dxrow) dxrow[ix] += wval * gv;
                                    dw_acc += gv * xrow[ix];
                                }
                            }
                            if (dwbase) dwbase[a * kw + bb] += dw_acc;
                        }
                }
            }
            if (ig.size() > 2 && ig[2]) {
                for (int oc = 0; oc < co; ++oc) {
                    const double* gplane = pg + static_cast<std::size_t>(oc) * ho * wo;
                    double acc = 0.0;
                    for (int i = 0; i < ho * wo; ++i) acc += gplane[i];
                    ig[2]->ptr()[oc] += acc;
                }
            }
        });
}

// ---------------------------------------------------------- layout/resampling

NodePtr chw_to_tokens(const NodePtr& x) {
    if (x->value.ndim() != 3) throw std::invalid_argument("chw_to_tokens: expects (C,h,w)");
    int c = x->value.dim(0), h = x->value.dim(1), w = x->value.dim(2);
    Tensor out({h * w, c});
    const double* px = x->value.ptr();
    double* po = out.ptr();
    for (int ic = 0; ic < c; ++ic)
        for (int s = 0; s < h * w; ++s)
            po[static_cast<std::size_t>(s) * c + ic] = px[static_cast<std::size_t>(ic) * h * w + s];
    return make_node(std::move(out), {x}, [c, h, w](const Tensor& g, const std::vector<Tensor*>& ig) {
        if (!ig[0]) return;
        double* d = ig[0]->ptr();
        const double* pg = g.ptr();
        for (int ic = 0; ic < c; ++ic)
            for (int s = 0; s < h * w; ++s)
                d[static_cast<std::size_t>(ic) * h * w + s] +=
                    pg[static_cast<std::size_t>(s) * c + ic];
    });
}

NodePtr tokens_to_chw(const NodePtr& x, int h, int w) {
    if (x->value.ndim() != 2 || x->value.dim(0) != h * w)
        throw std::invalid_argument("tokens_to_chw: shape mismatch");
    int c = x->value.dim(1);
    Tensor out({c, h, w});
    const double* px = x->value.ptr();
    double* po = out.ptr();
    for (int ic = 0; ic < c; ++ic)
        for (int s = 0; s < h * w; ++s)
            po[static_cast<std::size_t>(ic) * h * w + s] = px[static_cast<std::size_t>(s) * c + ic];
    return make_node(std::move(out), {x}, [c, h, w](const Tensor& g, const std::vector<Tensor*>& ig) {
        if (!ig[0]) return;
        double* d = ig[0]->ptr();
        const double* pg = g.ptr();
        for (int ic = 0; ic < c; ++ic)
            for (int s = 0; s < h * w; ++s)
                d[static_cast<std::size_t>(s) * c + ic] +=
                    pg[static_cast<std::size_t>(ic) * h * w + s];
    });
}

NodePtr tchw_to_tokens(const NodePtr& x) {
    if (x->value.ndim() != 4) throw std::invalid_argument("tchw_to_tokens: expects (T,C,h,w)");
    int t = x->value.dim(0), c = x->value.dim(1), h = x->value.dim(2), w = x->value.dim(3);
    Tensor out({t * h * w, c});
    const double* px = x->value.ptr();
    double* po = out.ptr();
    for (int it = 0; it < t; ++it)
        for (int ic = 0; ic < c; ++ic) {
            const double* plane = px + (static_cast<std::size_t>(it) * c + ic) * h * w;
            for (int s = 0; s < h * w; ++s)
                po[(static_cast<std::size_t>(it) * h * w + s) * c + ic] = plane[s];
        }
    return make_node(std::move(out), {x},
                     [t, c, h, w](const Tensor& g, const std::vector<Tensor*>& ig) {
                         if (!ig[0]) return;
                         double* d = ig[0]->ptr();
                         const double* pg = g.ptr();
                         for (int it = 0; it < t; ++it)
                             for (int ic = 0; ic < c; ++ic) {
                                 double* plane = d + (static_cast<std::size_t>(it) * c + ic) * h * w;
                                 for (int s = 0; s < h * w; ++s)
                                     plane[s] +=
                                         pg[(static_cast<std::size_t>(it) * h * w + s) * c + ic];
                             }
                     });
}

NodePtr stack_frames(const std::vector<NodePtr>& xs) {
    if (xs.empty()) throw std::invalid_argument("stack_frames: empty");
    const auto& s0 = xs[0]->value.shape;
    for (const auto& x : xs)
        if (x->value.shape != s0) throw std::invalid_argument("stack_frames: shape mismatch");
    int n = static_cast<int>(xs.size());
    std::int64_t per = xs[0]->value.numel();
    std::vector<int> shape{n};
    shape.insert(shape.end(), s0.begin(), s0.end());
    Tensor out(shape);
    for (int i = 0; i < n; ++i)
        std::memcpy(out.ptr() + static_cast<std::size_t>(i) * per, xs[i]->value.ptr(),
                    sizeof(double) * static_cast<std::size_t>(per));
    return make_node(std::move(out), xs, [n, per](const Tensor& g, const std::vector<Tensor*>& ig) {
        for (int i = 0; i < n; ++i) {
            if (!ig[i]) continue;
            double* d = ig[i]->ptr();
            const double* pg = g.ptr() + static_cast<std::size_t>(i) * per;
            for (std::int64_t j = 0; j < per; ++j) d[j] += pg[j];
        }
    });
}

NodePtr frame(const NodePtr& x, int t) {
    if (x->value.ndim() != 4) throw std::invalid_argument("frame: expects (T,C,h,w)");
    int tt = x->value.dim(0);
    if (t < 0 || t >= tt) throw std::out_of_range("frame index out of range");
    std::int64_t per = x->value.numel() / tt;
    Tensor out({x->value.dim(1), x->value.dim(2), x->value.dim(3)});
    std::memcpy(out.ptr(), x->value.ptr() + static_cast<std::size_t>(t) * per,
                sizeof(double) * static_cast<std::size_t>(per));
    return make_node(std::move(out), {x}, [t, per](const Tensor& g, const std::vector<Tensor*>& ig) {
        if (!ig[0]) return;
        double* d = ig[0]->ptr() + static_cast<std::size_t>(t) * per;
        const double* pg = g.ptr();
        for (std::int64_t j = 0; j < per; ++j) d[j] += pg[j];
    });
}

NodePtr upsample2x_chw(const NodePtr& x) {
    if (x->value.ndim() != 3) throw std::invalid_argument("upsample2x: expects (C,h,w)");
    int c = x->value.dim(0), h = x->value.dim(1), w = x->value.dim(2);
    Tensor out({c, 2 * h, 2 * w});
    const double* px = x->value.ptr();
    double* po = out.ptr();
    for (int ic = 0; ic < c; ++ic)
        for (int oy = 0; oy < 2 * h; ++oy)
            for (int ox = 0; ox < 2 * w; ++ox)
                po[(static_cast<std::size_t>(ic) * 2 * h + oy) * 2 * w + ox] =
                    px[(static_cast<std::size_t>(ic) * h + oy / 2) * w + ox / 2];
    return make_node(std::move(out), {x}, [c, h, w](const Tensor& g, const std::vector<Tensor*>& ig) {
        if (!ig[0]) return;
        double* d = ig[0]->ptr();
        const double* pg = g.ptr();
        for (int ic = 0; ic < c; ++ic)
            for (int oy = 0; oy < 2 * h; ++oy)
                for (int ox = 0; ox < 2 * w; ++ox)
                    d[(static_cast<std::size_t>(ic) * h + oy / 2) * w + ox / 2] +=
                        pg[(static_cast<std::size_t>(ic) * 2 * h + oy) * 2 * w + ox];
    });
}

NodePtr upsample2x_tokens(const NodePtr& x, int h, int w) {
    if (x->value.ndim() != 2 || x->value.dim(0) != h * w)
        throw std::invalid_argument("upsample2x_tokens: shape mismatch");
    int c = x->value.dim(1);
    Tensor out({4 * h * w, c});
    const double* px = x->value.ptr();
    double* po = out.ptr();
    for (int oy = 0; oy < 2 * h; ++oy)
        for (int ox = 0; ox < 2 * w; ++ox)
            std::memcpy(po + (static_cast<std::size_t>(oy) * 2 * w + ox) * c,
                        px + (static_cast<std::size_t>(oy / 2) * w + ox / 2) * c,
                        sizeof(double) * c);
    return make_node(std::move(out), {x},
                     [c, h, w](const Tensor& g, const std::vector<Tensor*>& ig) {
                         if (!ig[0]) return;
                         double* d = ig[0]->ptr();
                         const double* pg = g.ptr();
                         for (int oy = 0; oy < 2 * h; ++oy)
                             for (int ox = 0; ox < 2 * w; ++ox) {
                                 double* drow =
                                     d + (static_cast<std::size_t>(oy / 2) * w + ox / 2) * c;
                                 const double* grow =
                                     pg + (static_cast<std::size_t>(oy) * 2 * w + ox) * c;
                                 for (int ic = 0; ic < c; ++ic) drow[ic] += grow[ic];
                             }
                     });
}

namespace {
struct BilinearTap {
    int i0, i1;
    double f;  // weight on i1
};
std::vector<BilinearTap> bilinear_taps(int in, int out) {
    // align_corners=false: src = (dst + 0.5) * in/out - 0.5, clamped borders
    std::vector<BilinearTap> taps(static_cast<std::size_t>(out));
    double ratio = static_cast<double>(in) / out;
    for (int o = 0; o < out; ++o) {
        double src = (o + 0.5) * ratio - 0.5;
        int i0 = static_cast<int>(std::floor(src));
        double f = src - i0;
        int i1 = i0 + 1;
        if (i0 < 0) {
            i0 = 0;
            i1 = 0;
            f = 0.0;
        }
        if (i1 > in - 1) {
            i1 = in - 1;
            if (i0 > in - 1) i0 = in - 1;
            if (i0 == i1) f = 0.0;
        }
        taps[static_cast<std::size_t>(o)] = {i0, i1, f};
    }
    return taps;
}
}  // namespace

NodePtr bilinear_resize2d(const NodePtr& x, int oh, int ow) {
    if (x->value.ndim() != 2) throw std::invalid_argument("bilinear_resize2d: expects (h,w)");
    if (oh < 1 || ow < 1) throw std::invalid_argument("bilinear_resize2d: empty output");
    int h = x->value.dim(0), w = x->value.dim(1);
    auto ty = std::make_shared<std::vector<BilinearTap>>(bilinear_taps(h, oh));
    auto tx = std::make_shared<std::vector<BilinearTap>>(bilinear_taps(w, ow));
    Tensor out({oh, ow});
    const double* px = x->value.ptr();
    double* po = out.ptr();
    for (int oy = 0; oy < oh; ++oy) {
        const auto& yy = (*ty)[static_cast<std::size_t>(oy)];
        const double* r0 = px + static_cast<std::size_t>(yy.i0) * w;
        const double* r1 = px + static_cast<std::size_t>(yy.i1) * w;
        for (int ox = 0; ox < ow; ++ox) {
            const auto& xx = (*tx)[static_cast<std::size_t>(ox)];
            double top = (1.0 - xx.f) * r0[xx.i0] + xx.f * r0[xx.i1];
            double bot = (1.0 - xx.f) * r1[xx.i0] + xx.f * r1[xx.i1];
            po[static_cast<std::size_t>(oy) * ow + ox] = (1.0 - yy.f) * top + yy.f * bot;
        }
    }
    return make_node(std::move(out), {x},
                     [ty, tx, w, ow, oh](const Tensor& g, const std::vector<Tensor*>& ig) {
                         if (!ig[0]) return;
                         double* d = ig[0]->ptr();
                         const double* pg = g.ptr();
                         for (int oy = 0; oy < oh; ++oy) {
                             const auto& yy = (*ty)[static_cast<std::size_t>(oy)];
                             for (int ox = 0; ox < ow; ++ox) {
                                 const auto& xx = (*tx)[static_cast<std::size_t>(ox)];
                                 double gv = pg[static_cast<std::size_t>(oy) * ow + ox];
                                 d[static_cast<std::size_t>(yy.i0) * w + xx.i0] +=
                                     gv * (1.0 - yy.f) * (1.0 - xx.f);
                                 d[static_cast<std::size_t>(yy.i0) * w + xx.i1] +=
                                     gv * (1.0 - yy.f) * xx.f;
                                 d[static_cast<std::size_t>(yy.i1) * w + xx.i0] +=
                                     gv * yy.f * (1.0 - xx.f);
                                 d[static_cast<std::size_t>(yy.i1) * w + xx.i1] +=
                                     gv * yy.f * xx.f;
                             }
                         }
                     });
}

NodePtr adaptive_avg_pool(const NodePtr& x, int gh, int gw) {
    if (x->value.ndim() != 3) throw std::invalid_argument("adaptive_avg_pool: expects (C,h,w)");
    int c = x->value.dim(0), h = x->value.dim(1), w = x->value.dim(2);
    if (gh < 1 || gw < 1 || gh > h || gw > w)
        throw std::invalid_argument("adaptive_avg_pool: invalid grid");
    Tensor out({c, gh, gw});
    const double* px = x->value.ptr();
    double* po = out.ptr();
    auto lo = [](int i, int n, int g) { return (i * n) / g; };
    auto hi = [](int i, int n, int g) { return ((i + 1) * n + g - 1) / g; };
    for (int ic = 0; ic < c; ++ic)
        for (int gy = 0; gy < gh; ++gy)
            for (int gx = 0; gx < gw; ++gx) {
                int y0 = lo(gy, h, gh), y1 = hi(gy, h, gh);
                int x0 = lo(gx, w, gw), x1 = hi(gx, w, gw);
                double acc = 0.0;
                for (int y = y0; y < y1; ++y)
                    for (int xx = x0; xx < x1; ++xx)
                        acc += px[(static_cast<std::size_t>(ic) * h + y) * w + xx];
                po[(static_cast<std::size_t>(ic) * gh + gy) * gw + gx] =
                    acc / ((y1 - y0) * (x1 - x0));
            }
    return make_node(
        std::move(out), {x}, [c, h, w, gh, gw](const Tensor& g, const std::vector<Tensor*>& ig) {
            if (!ig[0]) return;
            double* d = ig[0]->ptr();
            const double* pg = g.ptr();
            auto lo = [](int i, int n, int gg) { return (i * n) / gg; };
            auto hi = [](int i, int n, int gg) { return ((i + 1) * n + gg - 1) / gg; };
            for (int ic = 0; ic < c; ++ic)
                for (int gy = 0; gy < gh; ++gy)
                    for (int gx = 0; gx < gw; ++gx) {
                        int y0 = lo(gy, h, gh), y1 = hi(gy, h, gh);
                        int x0 = lo(gx, w, gw), x1 = hi(gx, w, gw);
                        double gv = pg[(static_cast<std::size_t>(ic) * gh + gy) * gw + gx] /
                                    ((y1 - y0) * (x1 - x0));
                        for (int y = y0; y < y1; ++y)
                            for (int xx = x0; xx < x1; ++xx)
                                d[(static_cast<std::size_t>(ic) * h + y) * w + xx] += gv;
                    }
        });
}

// --------------------------------------------------------- reductions/losses

NodePtr sum_all(const NodePtr& x) {
    double acc = 0.0;
    for (double v : x->value.data) acc += v;
    return make_node(Tensor::scalar(acc), {x},
                     [](const Tensor& g, const std::vector<Tensor*>& ig) {
                         if (!ig[0]) return;
                         double gv = g.data[0];
                         for (double& d : ig[0]->data) d += gv;
                     });
}

NodePtr mean_all(const NodePtr& x) {
    return scale(sum_all(x), 1.0 / static_cast<double>(x->value.numel()));
}

NodePtr kld_loss(const Tensor& gt, const NodePtr& logits) {
    if (gt.numel() != logits->value.numel())
        throw std::invalid_argument("kld_loss: shape mismatch " + gt.shape_str() + " vs " +
                                    logits->value.shape_str());
    std::int64_t n = gt.numel();
    const double* pg = gt.ptr();
    const double* pl = logits->value.ptr();
    double mx = -1e300;
    for (std::int64_t i = 0; i < n; ++i) {
        if (!std::isfinite(pl[i])) throw std::invalid_argument("kld_loss: non-finite logits");
        if (pl[i] > mx) mx = pl[i];
    }
    double denom = 0.0;
    for (std::int64_t i = 0; i < n; ++i) denom += std::exp(pl[i] - mx);
    double lse = mx + std::log(denom);
    double loss = 0.0;
    double support_mass = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        if (pg[i] > 0.0) {
            loss += pg[i] * (std::log(pg[i]) - (pl[i] - lse));
            support_mass += pg[i];
        }
    }
    Tensor gt_copy = gt;
    Tensor lv = logits->value;
    return make_node(Tensor::scalar(loss), {logits},
                     [gt_copy, lv, lse, support_mass, n](const Tensor& g,
                                                         const std::vector<Tensor*>& ig) {
                         if (!ig[0]) return;
                         double gs = g.data[0];
                         double* d = ig[0]->ptr();
                         const double* pg2 = gt_copy.ptr();
                         const double* pl2 = lv.ptr();
                         for (std::int64_t i = 0; i < n; ++i) {
                             double sm = std::exp(pl2[i] - lse);
                             double gi = pg2[i] > 0.0 ? pg2[i] : 0.0;
                             d[i] += gs * (support_mass * sm - gi);
                         }
                     });
}

NodePtr cross_entropy(const NodePtr& logits, int label0) {
    if (logits->value.ndim() != 1) throw std::invalid_argument("cross_entropy: expects (c)");
    int c = logits->value.dim(0);
    if (label0 < 0 || label0 >= c) throw std::out_of_range("cross_entropy: label out of range");
    const double* pl = logits->value.ptr();
    double mx = -1e300;
    for (int i = 0; i < c; ++i)
        if (pl[i] > mx) mx = pl[i];
    double denom = 0.0;
    for (int i = 0; i < c; ++i) denom += std::exp(pl[i] - mx);
    double lse = mx + std::log(denom);
    double loss = lse - pl[label0];
    Tensor lv = logits->value;
    return make_node(Tensor::scalar(loss), {logits},
                     [lv, lse, label0, c](const Tensor& g, const std::vector<Tensor*>& ig) {
                         if (!ig[0]) return;
                         double gs = g.data[0];
                         double* d = ig[0]->ptr();
                         const double* pl2 = lv.ptr();
                         for (int i = 0; i < c; ++i) {
                             double sm = std::exp(pl2[i] - lse);
                             d[i] += gs * (sm - (i == label0 ? 1.0 : 0.0));
                         }
                     });
}

}  // namespace affground::ag
