#include "streamdiff/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>

#include "streamdiff/errors.hpp"

namespace streamdiff {

void ModelConfig::validate() const {
    if (channels <= 0 || grid_h <= 0 || grid_w <= 0 || width <= 0 || heads <= 0 || layers <= 0 ||
        audio_dim <= 0 || identity_dim <= 0) {
        throw ArgumentError("model config extents must be positive");
    }
    if (width % heads != 0) {
        throw ArgumentError("model width " + std::to_string(width) + " not divisible by " +
                            std::to_string(heads) + " heads");
    }
    if (head_dim() % 2 != 0) {
        throw ArgumentError("head_dim must be even for rotary pairs, got " +
                            std::to_string(head_dim()));
    }
    if (frames_per_block != 3) {
        throw ArgumentError("frames_per_block is fixed at 3, got " +
                            std::to_string(frames_per_block));
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

namespace {

Tensor scaled_normal(Rng& rng, std::vector<Index> shape, float std) {
    Tensor t = randn(rng, std::move(shape));
    t.flat() *= std;
    return t;
}

}  // namespace

DenoiserParams DenoiserParams::zeros(const ModelConfig& config) {
    config.validate();
    const Index c = config.channels, wd = config.width;
    DenoiserParams p;
    p.config = config;
    p.in_w   = Tensor({c, wd});
    p.in_b   = Tensor({wd});
    p.t_w1   = Tensor({wd, wd});
    p.t_b1   = Tensor({wd});
    p.t_w2   = Tensor({wd, wd});
    p.t_b2   = Tensor({wd});
    p.audio_w = Tensor({config.audio_dim, wd});
    p.audio_b = Tensor({wd});
    p.id_w    = Tensor({config.identity_dim, wd});
    p.id_b    = Tensor({wd});
    p.ref_w   = Tensor({config.frame_elems(), wd});
    p.ref_b   = Tensor({wd});
    p.layers.resize(static_cast<size_t>(config.layers));
    for (LayerParams& l : p.layers) {
        l.norm1_g = Tensor({wd});
        l.wq = Tensor({wd, wd});
        l.wk = Tensor({wd, wd});
        l.wv = Tensor({wd, wd});
        l.wo = Tensor({wd, wd});
        l.norm2_g = Tensor({wd});
        l.cq = Tensor({wd, wd});
        l.ck = Tensor({wd, wd});
        l.cv = Tensor({wd, wd});
        l.co = Tensor({wd, wd});
        l.norm3_g = Tensor({wd});
        l.w1 = Tensor({wd, 4 * wd});
        l.b1 = Tensor({4 * wd});
        l.w2 = Tensor({4 * wd, wd});
        l.b2 = Tensor({wd});
    }
    p.head_norm_g = Tensor({wd});
    p.head_w      = Tensor({wd, c});
    p.head_b      = Tensor({c});
    return p;
}

DenoiserParams DenoiserParams::init(const ModelConfig& config, Rng& rng) {
    DenoiserParams p = zeros(config);
    const float std  = 1.0f / std::sqrt(static_cast<float>(config.width));
    auto fill_normal = [&](Tensor& t) { t = scaled_normal(rng, t.shape(), std); };
    auto fill_ones   = [](Tensor& t) { t.flat().setOnes(); };

    fill_normal(p.in_w);
    fill_normal(p.t_w1);
    fill_normal(p.t_w2);
    fill_normal(p.audio_w);
    fill_normal(p.id_w);
    fill_normal(p.ref_w);
    for (LayerParams& l : p.layers) {
        fill_ones(l.norm1_g);
        fill_normal(l.wq);
        fill_normal(l.wk);
        fill_normal(l.wv);
        fill_normal(l.wo);
        fill_ones(l.norm2_g);
        fill_normal(l.cq);
        fill_normal(l.ck);
        fill_normal(l.cv);
        fill_normal(l.co);
        fill_ones(l.norm3_g);
        fill_normal(l.w1);
        fill_normal(l.w2);
    }
    fill_ones(p.head_norm_g);
    // head_w / head_b stay zero so an untrained model is the identity of its
    // own bias, which the trivial-model tests pin down.
    return p;
}

namespace {

template <typename P, typename F>
void visit_impl(P& p, const F& f) {
    f("embed.in.w", p.in_w);
    f("embed.in.b", p.in_b);
    f("t.fc1.w", p.t_w1);
    f("t.fc1.b", p.t_b1);
    f("t.fc2.w", p.t_w2);
    f("t.fc2.b", p.t_b2);
    f("mem.audio.w", p.audio_w);
    f("mem.audio.b", p.audio_b);
    f("mem.id.w", p.id_w);
    f("mem.id.b", p.id_b);
    f("mem.ref.w", p.ref_w);
    f("mem.ref.b", p.ref_b);
    for (size_t i = 0; i < p.layers.size(); ++i) {
        auto& l = p.layers[i];
        const std::string k = "layer" + std::to_string(i) + ".";
        f(k + "norm1.g", l.norm1_g);
        f(k + "attn.wq", l.wq);
        f(k + "attn.wk", l.wk);
        f(k + "attn.wv", l.wv);
        f(k + "attn.wo", l.wo);
        f(k + "norm2.g", l.norm2_g);
        f(k + "cross.wq", l.cq);
        f(k + "cross.wk", l.ck);
        f(k + "cross.wv", l.cv);
        f(k + "cross.wo", l.co);
        f(k + "norm3.g", l.norm3_g);
        f(k + "mlp.w1", l.w1);
        f(k + "mlp.b1", l.b1);
        f(k + "mlp.w2", l.w2);
        f(k + "mlp.b2", l.b2);
    }
    f("head.norm.g", p.head_norm_g);
    f("head.w", p.head_w);
    f("head.b", p.head_b);
}

}  // namespace

void DenoiserParams::visit(const std::function<void(const std::string&, Tensor&)>& f) {
    visit_impl(*this, f);
}

void DenoiserParams::visit(const std::function<void(const std::string&, const Tensor&)>& f) const {
    visit_impl(*this, f);
}

// ---------------------------------------------------------------------------
// Mask and timestep embedding
// ---------------------------------------------------------------------------

Tensor attention_mask(const MaskLayout& layout) {
    if (layout.sink_frames < 0 || layout.recent_frames < 0 || layout.condition_frames < 0 ||
        layout.window_frames < 0) {
        throw ArgumentError("mask layout counts must be non-negative");
    }
    if (layout.condition_frames > 1) {
        throw ArgumentError("at most one condition frame");
    }
    if (layout.frames_per_block <= 0) {
        throw ArgumentError("frames_per_block must be positive");
    }
    const Index cached = layout.sink_frames + layout.recent_frames;
    const Index fixed  = cached + layout.condition_frames;
    const Index total  = fixed + layout.window_frames;
    Tensor mask({total, total});
    MatMap m = mask.mat(total, total);
    for (Index i = 0; i < layout.window_frames; ++i) {
        const Index row   = fixed + i;
        const Index block = i / layout.frames_per_block;
        m.row(row).head(fixed).setOnes();
        const Index visible =
            std::min((block + 1) * layout.frames_per_block, layout.window_frames);
        m.row(row).segment(fixed, visible).setOnes();
    }
    return mask;
}

namespace {

inline float gelu(float x) {
    return 0.5f * x * (1.0f + std::erf(x * 0.70710678f));
}

void gelu_inplace(Tensor& t) {
    float* d = t.data();
    for (Index i = 0; i < t.size(); ++i) d[i] = gelu(d[i]);
}

// y = x * w + b, broadcasting b over rows.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    Tensor y = matmul(x, w);
    MatMap m = y.rows2d();
    m.rowwise() += Eigen::Map<const Eigen::RowVectorXf>(b.data(), b.size());
    return y;
}

Tensor sinusoid(int t, Index width) {
    Tensor e({width});
    const Index half = width / 2;
    const double x   = static_cast<double>(t) / 1000.0;
    for (Index i = 0; i < half; ++i) {
        const double freq =
            half > 1 ? std::pow(10000.0, static_cast<double>(i) / static_cast<double>(half - 1))
                     : 1.0;
        e[i]        = static_cast<float>(std::sin(x * freq));
        e[half + i] = static_cast<float>(std::cos(x * freq));
    }
    return e;
}

void check_timestep(int t, const char* what) {
    if (t < 0 || t > 1000) {
        throw ArgumentError(std::string(what) + " timestep " + std::to_string(t) +
                            " outside [0, 1000]");
    }
}

}  // namespace

Tensor timestep_embed(int t, const DenoiserParams& params) {
    check_timestep(t, "embed");
    const Index wd = params.config.width;
    Tensor e       = sinusoid(t, wd);
    Tensor row({1, wd}, std::vector<float>(e.data(), e.data() + wd));
    Tensor h = linear(row, params.t_w1, params.t_b1);
    gelu_inplace(h);
    Tensor out = linear(h, params.t_w2, params.t_b2);
    return Tensor({wd}, std::vector<float>(out.data(), out.data() + wd));
}

// ---------------------------------------------------------------------------
// Joint pass
// ---------------------------------------------------------------------------

namespace {

// [C x H x W] latent -> [spatial x C] token rows starting at row_offset.
void latent_to_tokens(const float* latent, Index c, Index spatial, MatMap tokens,
                      Index row_offset) {
    for (Index s = 0; s < spatial; ++s) {
        for (Index ch = 0; ch < c; ++ch) {
            tokens(row_offset + s, ch) = latent[ch * spatial + s];
        }
    }
}

}  // namespace

InContextResult forward_incontext(std::span<const InContextFrame> frames, const Tensor& frame_mask,
                                  const KvCache* cache, const IndexAssignment* assignment,
                                  const RopeTable& table, const ConditioningBundle& bundle,
                                  const DenoiserParams& params) {
    const ModelConfig& cfg = params.config;
    const Index c = cfg.channels, spatial = cfg.spatial(), wd = cfg.width;
    const Index heads = cfg.heads, hd = cfg.head_dim();
    const Index n_frames = static_cast<Index>(frames.size());

    if (n_frames == 0) {
        throw ArgumentError("forward needs at least one in-context frame");
    }
    if (cache != nullptr && assignment == nullptr) {
        throw ArgumentError("cache retrieval needs an index assignment");
    }
    for (const InContextFrame& f : frames) {
        check_timestep(f.t, "frame");
        if (f.latent.rank() != 3 || f.latent.dim(0) != c || f.latent.dim(1) != cfg.grid_h ||
            f.latent.dim(2) != cfg.grid_w) {
            throw ArgumentError("frame latent must be [C x H x W], got " +
                                shape_string(f.latent.shape()));
        }
        if (f.t_index < 0) {
            throw ArgumentError("temporal index must be non-negative");
        }
    }
    if (bundle.identity.size() != cfg.identity_dim) {
        throw ArgumentError("identity embedding size mismatch");
    }
    if (bundle.reference.size() != cfg.frame_elems()) {
        throw ArgumentError("reference latent size mismatch");
    }
    if (bundle.audio.rank() != 2 || bundle.audio.last_dim() != cfg.audio_dim) {
        throw ArgumentError("audio features must be [frames x audio_dim]");
    }
    for (const InContextFrame& f : frames) {
        if (f.audio_id >= bundle.audio.dim(0)) {
            throw ArgumentError("audio features end at frame " +
                                std::to_string(bundle.audio.dim(0)) + ", pass needs frame " +
                                std::to_string(f.audio_id));
        }
    }

    std::vector<FrameTag> cache_tags;
    if (cache != nullptr) {
        cache_tags = cache->layout();
        for (const FrameTag& tag : cache_tags) {
            if (!assignment->has_frame(tag.id)) {
                throw ArgumentError("cached frame " + std::to_string(tag.id) +
                                    " missing from the index assignment");
            }
        }
    }
    const Index cached_frames = static_cast<Index>(cache_tags.size());
    const Index mask_frames   = cached_frames + n_frames;
    if (frame_mask.rank() != 2 || frame_mask.dim(0) != mask_frames ||
        frame_mask.dim(1) != mask_frames) {
        throw ArgumentError("frame mask must be [" + std::to_string(mask_frames) + " x " +
                            std::to_string(mask_frames) + "], got " +
                            shape_string(frame_mask.shape()));
    }

    const Index tokens = n_frames * spatial;
    Tensor x({tokens, c});
    {
        MatMap xm = x.mat(tokens, c);
        for (Index f = 0; f < n_frames; ++f) {
            latent_to_tokens(frames[static_cast<size_t>(f)].latent.data(), c, spatial, xm,
                             f * spatial);
        }
    }

    Tensor h = linear(x, params.in_w, params.in_b);  // [tokens x width]
    for (Index f = 0; f < n_frames; ++f) {
        const Tensor e = timestep_embed(frames[static_cast<size_t>(f)].t, params);
        h.mat(tokens, wd).middleRows(f * spatial, spatial).rowwise() +=
            Eigen::Map<const Eigen::RowVectorXf>(e.data(), e.size());
    }

    // Cross-attention memory: per-frame audio token plus shared identity and
    // reference tokens.
    Tensor mem({n_frames, 3, wd});
    {
        Tensor id_tok = linear(
            Tensor({1, cfg.identity_dim},
                   std::vector<float>(bundle.identity.data(),
                                      bundle.identity.data() + cfg.identity_dim)),
            params.id_w, params.id_b);
        Tensor ref_tok = linear(
            Tensor({1, cfg.frame_elems()},
                   std::vector<float>(bundle.reference.data(),
                                      bundle.reference.data() + cfg.frame_elems())),
            params.ref_w, params.ref_b);
        for (Index f = 0; f < n_frames; ++f) {
            Tensor audio_row({1, cfg.audio_dim});
            const FrameId src = frames[static_cast<size_t>(f)].audio_id;
            if (src >= 0) {
                std::memcpy(audio_row.data(), bundle.audio.data() + src * cfg.audio_dim,
                            static_cast<size_t>(cfg.audio_dim) * sizeof(float));
            }
            Tensor audio_tok = linear(audio_row, params.audio_w, params.audio_b);
            float* dst = mem.data() + f * 3 * wd;
            std::memcpy(dst, audio_tok.data(), static_cast<size_t>(wd) * sizeof(float));
            std::memcpy(dst + wd, id_tok.data(), static_cast<size_t>(wd) * sizeof(float));
            std::memcpy(dst + 2 * wd, ref_tok.data(), static_cast<size_t>(wd) * sizeof(float));
        }
    }

    std::vector<std::pair<int, int>> hw;
    hw.reserve(static_cast<size_t>(spatial));
    for (Index gh = 0; gh < cfg.grid_h; ++gh) {
        for (Index gw = 0; gw < cfg.grid_w; ++gw) {
            hw.emplace_back(static_cast<int>(gh), static_cast<int>(gw));
        }
    }

    InContextResult result;
    result.kv_raw.resize(static_cast<size_t>(cfg.layers));

    const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(hd));
    const float neg_inf  = -std::numeric_limits<float>::infinity();

    for (Index layer = 0; layer < cfg.layers; ++layer) {
        const LayerParams& lp = params.layers[static_cast<size_t>(layer)];

        // Self-attention over cache || frames.
        {
            Tensor hn = rms_norm(h, lp.norm1_g);
            Tensor q  = matmul(hn, lp.wq);
            Tensor k  = matmul(hn, lp.wk);
            Tensor v  = matmul(hn, lp.wv);

            // K/V leave here pre-rotary; committed entries are made of them.
            auto& layer_kv = result.kv_raw[static_cast<size_t>(layer)];
            layer_kv.reserve(static_cast<size_t>(n_frames));
            for (Index f = 0; f < n_frames; ++f) {
                const float* ks = k.data() + f * spatial * wd;
                const float* vs = v.data() + f * spatial * wd;
                layer_kv.emplace_back(
                    Tensor({spatial, heads, hd}, std::vector<float>(ks, ks + spatial * wd)),
                    Tensor({spatial, heads, hd}, std::vector<float>(vs, vs + spatial * wd)));
            }

            for (Index f = 0; f < n_frames; ++f) {
                const std::int64_t t_idx = frames[static_cast<size_t>(f)].t_index;
                for (Index head = 0; head < heads; ++head) {
                    rope_strided(q.data() + f * spatial * wd + head * hd, spatial, wd, t_idx, hw,
                                 table);
                    rope_strided(k.data() + f * spatial * wd + head * hd, spatial, wd, t_idx, hw,
                                 table);
                }
            }

            RetrievedKv rk;
            if (cache != nullptr) {
                rk = cache->retrieve(static_cast<int>(layer), *assignment, table);
            }
            const Index cache_tokens = cached_frames * spatial;
            const Index keys         = cache_tokens + tokens;
            MatMap qm = q.mat(tokens, wd);
            MatMap km = k.mat(tokens, wd);
            MatMap vm = v.mat(tokens, wd);

            Tensor attn({tokens, wd});
            MatMap am = attn.mat(tokens, wd);
            for (Index head = 0; head < heads; ++head) {
                RowMatrixXf kf(keys, hd), vf(keys, hd);
                for (Index ct = 0; ct < cache_tokens; ++ct) {
                    kf.row(ct) = ConstMatMap(rk.k_roped.data() + ct * heads * hd + head * hd, 1, hd);
                    vf.row(ct) = ConstMatMap(rk.v.data() + ct * heads * hd + head * hd, 1, hd);
                }
                kf.bottomRows(tokens) = km.middleCols(head * hd, hd);
                vf.bottomRows(tokens) = vm.middleCols(head * hd, hd);

                for (Index f = 0; f < n_frames; ++f) {
                    const Index mrow = cached_frames + f;
                    bool queried    = false;
                    for (Index j = 0; j < mask_frames; ++j) {
                        if (frame_mask[mrow * mask_frames + j] != 0.0f) {
                            queried = true;
                            break;
                        }
                    }
                    if (!queried) continue;
                    RowMatrixXf scores = qm.middleRows(f * spatial, spatial)
                                             .middleCols(head * hd, hd) *
                                         kf.transpose() * inv_sqrt;
                    for (Index j = 0; j < mask_frames; ++j) {
                        if (frame_mask[mrow * mask_frames + j] != 0.0f) continue;
                        scores.middleCols(j * spatial, spatial).setConstant(neg_inf);
                    }
                    Tensor sm({spatial, keys},
                              std::vector<float>(scores.data(), scores.data() + scores.size()));
                    sm = softmax_lastdim(sm);
                    am.middleRows(f * spatial, spatial).middleCols(head * hd, hd) =
                        sm.mat(spatial, keys) * vf;
                }
            }
            Tensor delta = matmul(attn, lp.wo);
            for (Index f = 0; f < n_frames; ++f) {
                const Index mrow = cached_frames + f;
                bool queried    = false;
                for (Index j = 0; j < mask_frames; ++j) {
                    if (frame_mask[mrow * mask_frames + j] != 0.0f) {
                        queried = true;
                        break;
                    }
                }
                if (!queried) continue;  // key/value donors take no update
                h.mat(tokens, wd).middleRows(f * spatial, spatial) +=
                    delta.mat(tokens, wd).middleRows(f * spatial, spatial);
            }
        }

        // Cross-attention: each frame's tokens query its three memory tokens.
        {
            Tensor hn = rms_norm(h, lp.norm2_g);
            Tensor q  = matmul(hn, lp.cq);
            Tensor out({tokens, wd});
            MatMap qm = q.mat(tokens, wd);
            MatMap om = out.mat(tokens, wd);
            for (Index f = 0; f < n_frames; ++f) {
                const Tensor mem_f({3, wd}, std::vector<float>(mem.data() + f * 3 * wd,
                                                               mem.data() + (f + 1) * 3 * wd));
                Tensor kmem = matmul(mem_f, lp.ck);
                Tensor vmem = matmul(mem_f, lp.cv);
                for (Index head = 0; head < heads; ++head) {
                    auto qh = qm.middleRows(f * spatial, spatial).middleCols(head * hd, hd);
                    auto kh = kmem.mat(3, wd).middleCols(head * hd, hd);
                    auto vh = vmem.mat(3, wd).middleCols(head * hd, hd);
                    RowMatrixXf scores = qh * kh.transpose() * inv_sqrt;
                    Tensor sm({spatial, 3},
                              std::vector<float>(scores.data(), scores.data() + scores.size()));
                    sm = softmax_lastdim(sm);
                    om.middleRows(f * spatial, spatial).middleCols(head * hd, hd) =
                        sm.mat(spatial, 3) * vh;
                }
            }
            Tensor delta = matmul(out, lp.co);
            h.flat() += delta.flat();
        }

        // MLP.
        {
            Tensor hn = rms_norm(h, lp.norm3_g);
            Tensor a  = linear(hn, lp.w1, lp.b1);
            gelu_inplace(a);
            Tensor delta = linear(a, lp.w2, lp.b2);
            h.flat() += delta.flat();
        }
    }

    Tensor hn = rms_norm(h, params.head_norm_g);
    Tensor y  = linear(hn, params.head_w, params.head_b);  // [tokens x C]
    result.x0 = Tensor({n_frames, c, cfg.grid_h, cfg.grid_w});
    for (Index f = 0; f < n_frames; ++f) {
        for (Index s = 0; s < spatial; ++s) {
            for (Index ch = 0; ch < c; ++ch) {
                result.x0[f * cfg.frame_elems() + ch * spatial + s] =
                    y[(f * spatial + s) * c + ch];
            }
        }
    }
    return result;
}

ForwardResult forward(const Tensor& window_latents, std::span<const int> window_t,
                      const Tensor& condition_latent, int condition_t, const KvCache& cache,
                      const IndexAssignment& assignment, const RopeTable& table,
                      const ConditioningBundle& bundle, const DenoiserParams& params) {
    const ModelConfig& cfg = params.config;
    const Index fw = static_cast<Index>(assignment.window_ids.size());
    if (window_latents.rank() != 4 || window_latents.dim(0) != fw ||
        window_latents.dim(1) != cfg.channels || window_latents.dim(2) != cfg.grid_h ||
        window_latents.dim(3) != cfg.grid_w) {
        throw ArgumentError("window latents must be [" + std::to_string(fw) +
                            " x C x H x W], got " + shape_string(window_latents.shape()));
    }
    if (static_cast<Index>(window_t.size()) != fw) {
        throw ArgumentError("need one timestep per window frame");
    }

    std::vector<InContextFrame> frames;
    frames.reserve(static_cast<size_t>(1 + fw));
    {
        InContextFrame cond;
        cond.latent   = condition_latent;
        cond.t        = condition_t;
        cond.t_index  = assignment.condition_index();
        cond.audio_id = assignment.condition_source == kReferenceFrame
                            ? -1
                            : assignment.condition_source;
        cond.queried  = false;
        frames.push_back(std::move(cond));
    }
    for (Index f = 0; f < fw; ++f) {
        InContextFrame wf;
        const FrameId id = assignment.window_ids[static_cast<size_t>(f)];
        wf.latent        = Tensor({cfg.channels, cfg.grid_h, cfg.grid_w},
                                  std::vector<float>(window_latents.data() + f * cfg.frame_elems(),
                                                     window_latents.data() + (f + 1) * cfg.frame_elems()));
        wf.t       = window_t[static_cast<size_t>(f)];
        wf.t_index = assignment.index_of(id);
        wf.audio_id = id;
        wf.queried  = true;
        frames.push_back(std::move(wf));
    }

    const auto tags = cache.layout();
    const Tensor frame_mask = attention_mask({
        .sink_frames   = static_cast<Index>(std::count_if(
            tags.begin(), tags.end(), [](const FrameTag& t) { return t.is_sink; })),
        .recent_frames = static_cast<Index>(std::count_if(
            tags.begin(), tags.end(), [](const FrameTag& t) { return !t.is_sink; })),
        .condition_frames = 1,
        .window_frames    = fw,
        .frames_per_block = cfg.frames_per_block,
    });

    InContextResult core =
        forward_incontext(frames, frame_mask, &cache, &assignment, table, bundle, params);

    ForwardResult result;
    result.x0 = Tensor({fw, cfg.channels, cfg.grid_h, cfg.grid_w},
                       std::vector<float>(core.x0.data() + cfg.frame_elems(),
                                          core.x0.data() + (1 + fw) * cfg.frame_elems()));
    result.kv_candidates.resize(static_cast<size_t>(cfg.layers));
    for (int layer = 0; layer < cfg.layers; ++layer) {
        auto& dst = result.kv_candidates[static_cast<size_t>(layer)];
        auto& src = core.kv_raw[static_cast<size_t>(layer)];
        dst.reserve(static_cast<size_t>(fw));
        for (Index f = 0; f < fw; ++f) {
            CacheEntry e;
            e.frame_id = assignment.window_ids[static_cast<size_t>(f)];
            e.k_raw    = std::move(src[static_cast<size_t>(1 + f)].first);
            e.v        = std::move(src[static_cast<size_t>(1 + f)].second);
            dst.push_back(std::move(e));
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Checkpoint I/O
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'J', 'A', 'D', 'N'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in, const char* what) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) {
        throw FormatError(std::string("checkpoint truncated reading ") + what);
    }
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void save_checkpoint(const DenoiserParams& params, std::ostream& out) {
    out.write(kMagic, 4);
    put_u32(out, kVersion);
    const ModelConfig& c = params.config;
    for (int v : {c.channels, c.grid_h, c.grid_w, c.width, c.heads, c.layers, c.audio_dim,
                  c.identity_dim, c.frames_per_block}) {
        put_u32(out, static_cast<std::uint32_t>(v));
    }
    std::uint32_t count = 0;
    params.visit([&](const std::string&, const Tensor&) { ++count; });
    put_u32(out, count);
    params.visit([&](const std::string& name, const Tensor& t) {
        put_u32(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        put_u32(out, static_cast<std::uint32_t>(t.rank()));
        for (Index d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
        out.write(reinterpret_cast<const char*>(t.data()),
                  static_cast<std::streamsize>(t.size()) * 4);
    });
    if (!out) {
        throw FormatError("checkpoint write failed");
    }
}

DenoiserParams load_checkpoint(std::istream& in) {
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
        throw FormatError("bad checkpoint magic at offset 0");
    }
    const std::uint32_t version = get_u32(in, "version");
    if (version != kVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    }
    ModelConfig c;
    c.channels         = static_cast<int>(get_u32(in, "channels"));
    c.grid_h           = static_cast<int>(get_u32(in, "grid_h"));
    c.grid_w           = static_cast<int>(get_u32(in, "grid_w"));
    c.width            = static_cast<int>(get_u32(in, "width"));
    c.heads            = static_cast<int>(get_u32(in, "heads"));
    c.layers           = static_cast<int>(get_u32(in, "layers"));
    c.audio_dim        = static_cast<int>(get_u32(in, "audio_dim"));
    c.identity_dim     = static_cast<int>(get_u32(in, "identity_dim"));
    c.frames_per_block = static_cast<int>(get_u32(in, "frames_per_block"));
    c.validate();

    const std::uint32_t count = get_u32(in, "array count");
    std::map<std::string, Tensor> arrays;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = get_u32(in, "name length");
        if (name_len > 256) {
            throw FormatError("checkpoint name length " + std::to_string(name_len) +
                              " is implausible");
        }
        std::string name(name_len, '\0');
        if (!in.read(name.data(), name_len)) {
            throw FormatError("checkpoint truncated reading a name");
        }
        const std::uint32_t rank = get_u32(in, "rank");
        if (rank > 8) {
            throw FormatError("checkpoint rank " + std::to_string(rank) + " is implausible");
        }
        std::vector<Index> shape(rank);
        Index total = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            shape[d] = static_cast<Index>(get_u32(in, "dim"));
            total *= shape[d];
        }
        std::vector<float> data(static_cast<size_t>(total));
        if (!in.read(reinterpret_cast<char*>(data.data()),
                     static_cast<std::streamsize>(total) * 4)) {
            throw FormatError("checkpoint truncated reading array " + name);
        }
        arrays.emplace(name, Tensor(std::move(shape), std::move(data)));
    }

    DenoiserParams p = DenoiserParams::zeros(c);
    p.visit([&](const std::string& name, Tensor& t) {
        auto it = arrays.find(name);
        if (it == arrays.end()) {
            throw FormatError("checkpoint missing array " + name);
        }
        if (it->second.shape() != t.shape()) {
            throw FormatError("checkpoint array " + name + " has shape " +
                              shape_string(it->second.shape()) + ", config implies " +
                              shape_string(t.shape()));
        }
        t = std::move(it->second);
        arrays.erase(it);
    });
    if (!arrays.empty()) {
        throw FormatError("checkpoint has " + std::to_string(arrays.size()) +
                          " unexpected arrays, first: " + arrays.begin()->first);
    }
    return p;
}

void save_checkpoint_file(const DenoiserParams& params, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw InputError("cannot open " + path + " for writing");
    }
    save_checkpoint(params, out);
}

DenoiserParams load_checkpoint_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw InputError("cannot open " + path);
    }
    return load_checkpoint(in);
}

}  // namespace streamdiff
