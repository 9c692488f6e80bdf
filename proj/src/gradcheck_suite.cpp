#include "ddrn/gradcheck_suite.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <random>

#include "ddrn/embedding_space.hpp"
#include "ddrn/losses.hpp"
#include "ddrn/ops.hpp"
#include "ddrn/rng.hpp"

namespace ddrn {

namespace {

Tensor<double> uniform(Shape shape, Rng& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

Tensor<double> normal(Shape shape, Rng& rng, double std = 1.0) {
  std::normal_distribution<double> n(0.0, std);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = n(rng);
  return t;
}

// Reduces an output to a scalar with fixed random weights so every element
// contributes to the gradient.
Var<double> project(const Var<double>& out) {
  Rng rng(7);
  return sum(mul(out, out.tape().constant(uniform(out.shape(), rng))));
}

std::vector<double> gumbel_values(std::size_t n, Rng& rng) {
  std::vector<double> g(n);
  for (auto& v : g) v = -std::log(-std::log(uniform_open(rng)));
  return g;
}

}  // namespace

std::vector<GradCheckCase> gradcheck_registry(std::uint64_t seed) {
  Rng rng(seed);
  const auto w35 = uniform({3, 5}, rng);
  const auto w5 = uniform({5}, rng);
  const auto m43 = uniform({4, 3}, rng);
  const auto k65 = uniform({6, 5}, rng);
  const auto x35 = uniform({3, 5}, rng);
  const auto x43 = uniform({4, 3}, rng);

  std::vector<GradCheckCase> cases = {
      {"add", x35, [w35](Tape<double>& t, const Var<double>& x) { return project(add(x, t.constant(w35))); }},
      {"sub", x35, [w35](Tape<double>& t, const Var<double>& x) { return project(sub(t.constant(w35), x)); }},
      {"mul", x35, [w35](Tape<double>& t, const Var<double>& x) { return project(mul(x, t.constant(w35))); }},
      {"scale", x35, [](Tape<double>&, const Var<double>& x) { return project(scale(x, -1.7)); }},
      {"gelu", x35, [](Tape<double>&, const Var<double>& x) { return project(gelu(scale(x, 3.0))); }},
      {"sum", x35, [](Tape<double>&, const Var<double>& x) { return sum(mul(x, x)); }},
      {"mean", x35, [](Tape<double>&, const Var<double>& x) { return mean(mul(x, x)); }},
      {"matmul.lhs", x43, [w35](Tape<double>& t, const Var<double>& x) { return project(matmul(x, t.constant(w35))); }},
      {"matmul.rhs", x35, [m43](Tape<double>& t, const Var<double>& x) { return project(matmul(t.constant(m43), x)); }},
      {"matmul_nt", uniform({6, 5}, rng), [](Tape<double>&, const Var<double>& x) { return project(matmul_nt(x, x)); }},
      {"transpose", x35, [](Tape<double>&, const Var<double>& x) { return project(transpose(x)); }},
      {"add_row_vector", uniform({5}, rng),
       [w35](Tape<double>& t, const Var<double>& x) { return project(add_row_vector(t.constant(w35), x)); }},
      {"mul_row_vector", uniform({5}, rng),
       [w35](Tape<double>& t, const Var<double>& x) { return project(mul_row_vector(t.constant(w35), x)); }},
      {"softmax", x35, [](Tape<double>&, const Var<double>& x) { return project(softmax(scale(x, 2.0))); }},
      {"layer_norm", x35,
       [w5](Tape<double>& t, const Var<double>& x) { return project(layer_norm(x, t.constant(w5), t.constant(w5))); }},
      {"linear", x35,
       [k65](Tape<double>& t, const Var<double>& x) {
         return project(linear(x, t.constant(k65), t.constant(Tensor<double>({6}, 0.5))));
       }},
      {"cross_entropy", x35,
       [](Tape<double>&, const Var<double>& x) {
         return cross_entropy_with_label_smoothing(scale(x, 2.0), {0, 4, 2}, 0.1);
       }},
      {"batch_norm_1d", x43,
       [](Tape<double>& t, const Var<double>& x) {
         BatchNormStats<double> stats(3);
         return project(
             batch_norm_1d(x, t.constant(Tensor<double>({3}, {1.0, 0.5, 2.0})), Var<double>(), stats, true));
       }},
      {"concat_cols", x35,
       [w35](Tape<double>& t, const Var<double>& x) { return project(concat_cols<double>({t.constant(w35), x, x})); }},
      {"concat_rows", x35,
       [w35](Tape<double>& t, const Var<double>& x) { return project(concat_rows<double>({x, t.constant(w35), x})); }},
      {"gather_rows", x35, [](Tape<double>&, const Var<double>& x) { return project(gather_rows(x, {2, 0, 2, 1})); }},
      {"slice_cols", x35, [](Tape<double>&, const Var<double>& x) { return project(slice_cols(x, 1, 4)); }},
      {"mean_pool", x43, [](Tape<double>&, const Var<double>& x) { return project(mean_pool(x, 2)); }},
      {"l2_normalize_rows", x35, [](Tape<double>&, const Var<double>& x) { return project(l2_normalize_rows(x)); }},
      {"frobenius_norm", x35, [](Tape<double>&, const Var<double>& x) { return frobenius_norm(x); }},
      {"group_max_cols", uniform({3, 6}, rng),
       [](Tape<double>&, const Var<double>& x) { return project(group_max_cols(x, 3)); }, kPiecewiseTol},
      {"select_rows", x35,
       [w35](Tape<double>& t, const Var<double>& x) {
         return project(select_rows<double>({x, t.constant(w35), scale(x, 2.0)}, {2, 1, 0}));
       }},
      {"attention", uniform({6, 4}, rng),
       [](Tape<double>&, const Var<double>& x) { return project(attention(x, scale(x, 0.5), gelu(x), 2, 3, 2)); }},
  };

  {
    const auto p = normal({4, 4}, rng, 0.5);
    cases.push_back({"multi_head_attention", normal({6, 4}, rng), [p](Tape<double>& t, const Var<double>& x) {
                       Var<double> w = t.constant(p);
                       Var<double> b = t.constant(Tensor<double>({4}, 0.1));
                       AttentionParams<double> ap{w, b, scale(w, 0.7), b, scale(w, -0.4), b, transpose(w), b};
                       return project(multi_head_attention(x, ap, 2, 3, 2));
                     }});
  }

  // Embedding space.
  {
    const auto codebook = normal({5, 4}, rng);
    const auto tokens = normal({3, 4}, rng, 0.5);
    const auto g = gumbel_values(15, rng);
    cases.push_back({"similarity_logits", tokens, [codebook](Tape<double>& t, const Var<double>& x) {
                       return project(similarity_logits(x, t.constant(codebook)));
                     }});
    cases.push_back({"gumbel_softmax", normal({3, 5}, rng), [g](Tape<double>&, const Var<double>& x) {
                       GumbelNoise noise = GumbelNoise::frozen(g);
                       return project(gumbel_softmax(x, 0.5, noise));
                     }});
    auto soft_path = [g](const Var<double>& tok, const Var<double>& cb) {
      GumbelNoise noise = GumbelNoise::frozen(g);
      QuantizeOptions opt;
      opt.tau = 0.5;
      return project(matmul(quantize_st(tok, cb, opt, noise).soft_weights, cb));
    };
    cases.push_back({"quantize_st.soft.tokens", tokens, [codebook, soft_path](Tape<double>& t, const Var<double>& x) {
                       return soft_path(x, t.constant(codebook));
                     }});
    cases.push_back({"quantize_st.soft.codebook", codebook, [tokens, soft_path](Tape<double>& t, const Var<double>& x) {
                       return soft_path(t.constant(tokens), x);
                     }});
    cases.push_back({"orthogonal_loss", normal({5, 7}, rng),
                     [](Tape<double>&, const Var<double>& x) { return orthogonal_loss(x); }});
  }

  // Margin losses. Random points sit away from the cos = ±1 kinks.
  {
    const auto f = normal({3, 5}, rng);
    const auto w = normal({4, 5}, rng);
    const std::vector<int> y{0, 3, 1};
    const ArcMarginParams arc{0.2, 4.0};
    cases.push_back({"arcface_loss.features", f, [w, y, arc](Tape<double>& t, const Var<double>& x) {
                       return arcface_loss(x, y, t.constant(w), arc);
                     }});
    cases.push_back({"arcface_loss.centers", w, [f, y, arc](Tape<double>& t, const Var<double>& x) {
                       return arcface_loss(t.constant(f), y, x, arc);
                     }});
    const auto ws = normal({8, 5}, rng);
    cases.push_back({"subcenter_arcface_loss", ws,
                     [f, y, arc](Tape<double>& t, const Var<double>& x) {
                       return subcenter_arcface_loss(t.constant(f), y, x, 2, arc);
                     },
                     kPiecewiseTol});
  }
  {
    const HierarchyShape shape{3, 4};
    const auto f = normal({6, 5}, rng);
    const auto w = normal({shape.total_rows(), 5}, rng);
    const std::vector<int> y{0, 1, 2, 3, 1, 0};
    const ArcMarginParams arc{0.2, 4.0};
    std::vector<std::size_t> levels;
    {
      Tape<double> t;
      std::vector<RoutingTrace> traces;
      hs_arcface_loss(t.constant(f), y, t.constant(w), shape, arc, nullptr, &traces);
      for (const auto& tr : traces) levels.push_back(tr.level);
    }
    cases.push_back({"hs_arcface_loss.features", f,
                     [w, y, arc, shape, levels](Tape<double>& t, const Var<double>& x) {
                       return hs_arcface_loss(x, y, t.constant(w), shape, arc, &levels);
                     },
                     kPiecewiseTol});
    cases.push_back({"hs_arcface_loss.centers", w,
                     [f, y, arc, shape, levels](Tape<double>& t, const Var<double>& x) {
                       return hs_arcface_loss(t.constant(f), y, x, shape, arc, &levels);
                     },
                     kPiecewiseTol});
  }
  {
    const std::vector<int> y{0, 2, 1, 2};
    cases.push_back({"id_loss", normal({4, 3}, rng),
                     [y](Tape<double>&, const Var<double>& x) { return id_loss(scale(x, 2.0), y, 0.1); }});
    const std::vector<int> yt{0, 0, 0, 0, 1, 1, 1, 1};
    cases.push_back({"triplet_loss", normal({8, 4}, rng, 0.3),
                     [yt](Tape<double>&, const Var<double>& x) { return triplet_loss(x, yt, 0.3); }, kPiecewiseTol});
  }

  std::sort(cases.begin(), cases.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
  return cases;
}

std::vector<GradCheckRow> run_gradcheck_suite(const std::vector<GradCheckCase>& cases) {
  std::vector<GradCheckRow> rows;
  rows.reserve(cases.size());
  for (const auto& c : cases) {
    const GradCheckReport r = finite_diff_check(c.fn, c.point, 1e-5, c.tol);
    rows.push_back({c.name, r.max_rel_error, c.tol, r.pass});
  }
  return rows;
}

void print_gradcheck_table(const std::vector<GradCheckRow>& rows, std::ostream& out) {
  std::size_t width = 2;
  for (const auto& r : rows) width = std::max(width, r.name.size());
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%-*s  %-12s  %-8s  %s\n", static_cast<int>(width), "op", "max_rel_err", "tol",
                "result");
  out << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%-*s  %-12.3e  %-8.0e  %s\n", static_cast<int>(width), r.name.c_str(),
                  r.max_rel_error, r.tol, r.pass ? "PASS" : "FAIL");
    out << buf;
  }
}

}  // namespace ddrn
