#include "raydiff/rin.hpp"

#include <cmath>
#include <random>
#include <utility>

namespace raydiff {

RinConfig RinConfig::toy() {
    RinConfig c;
    c.num_blocks = 2;
    c.block_depth = 2;
    c.num_heads = 2;
    c.num_latents = 32;
    c.latent_dim = 64;
    c.image_embed_dim = 64;
    c.task_embed_dim = 32;
    c.ray_embed_dim = 51;
    c.ffn_mult = 4;
    c.tokenizer_channels = {16, 32, 64};
    return c;
}

void RinConfig::validate() const {
    auto positive = [](int v, const char* what) {
        if (v <= 0) throw ConfigError(std::string("RinConfig: ") + what + " must be positive");
    };
    positive(num_blocks, "num_blocks");
    positive(block_depth, "block_depth");
    positive(num_heads, "num_heads");
    positive(num_latents, "num_latents");
    positive(latent_dim, "latent_dim");
    positive(image_embed_dim, "image_embed_dim");
    positive(task_embed_dim, "task_embed_dim");
    positive(ray_embed_dim, "ray_embed_dim");
    positive(ffn_mult, "ffn_mult");
    for (int c : tokenizer_channels) positive(c, "tokenizer_channels");
    if (latent_dim % num_heads != 0) throw ConfigError("RinConfig: latent_dim must be divisible by num_heads");
    if (latent_dim % 2 != 0) throw ConfigError("RinConfig: latent_dim must be even");
}

std::size_t SceneInput::num_tokens() const {
    std::size_t n = 0;
    for (const auto& v : views) n += v.tokens.size();
    return n;
}

TokenGrid token_grid(int image_width, int image_height) {
    TokenGrid g;
    g.width = (image_width + 3) / 4;
    g.height = (image_height + 3) / 4;
    for (int y = 0; y < g.height; ++y)
        for (int x = 0; x < g.width; ++x)
            if (4 * x + 2 < image_width && 4 * y + 2 < image_height) g.valid_cells.push_back(y * g.width + x);
    return g;
}

std::vector<double> timestep_features(double timestep, int dim) {
    const int half = dim / 2;
    std::vector<double> f(dim, 0.0);
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / half);
        f[i] = std::sin(timestep * freq);
        f[half + i] = std::cos(timestep * freq);
    }
    return f;
}

namespace {

void add_linear(std::vector<ParamSpec>& s, const std::string& name, int in, int out) {
    s.push_back({name + ".w", in, out, true});
    s.push_back({name + ".b", 1, out, false});
}

void add_norm(std::vector<ParamSpec>& s, const std::string& name, int dim) {
    s.push_back({name + ".g", 1, dim, false});
    s.push_back({name + ".b", 1, dim, false});
}

void add_attention(std::vector<ParamSpec>& s, const std::string& name, int dim, bool cross) {
    add_norm(s, name + ".ln_q", dim);
    if (cross) add_norm(s, name + ".ln_kv", dim);
    add_linear(s, name + ".q", dim, dim);
    add_linear(s, name + ".k", dim, dim);
    add_linear(s, name + ".v", dim, dim);
    add_linear(s, name + ".o", dim, dim);
}

void add_ffn(std::vector<ParamSpec>& s, const std::string& name, int dim, int mult) {
    add_norm(s, name + ".ln", dim);
    add_linear(s, name + ".fc1", dim, dim * mult);
    add_linear(s, name + ".fc2", dim * mult, dim);
}

}  // namespace

std::vector<ParamSpec> parameter_specs(const RinConfig& cfg) {
    cfg.validate();
    const int D = cfg.latent_dim;
    std::vector<ParamSpec> s;
    s.push_back({"latents", cfg.num_latents, D, false});
    add_linear(s, "time.fc1", D, D);
    add_linear(s, "time.fc2", D, D);
    s.push_back({"task.rgb", 1, cfg.task_embed_dim, false});
    s.push_back({"task.depth", 1, cfg.task_embed_dim, false});
    const auto& ch = cfg.tokenizer_channels;
    add_linear(s, "tok.conv1", 9 * 3, ch[0]);
    add_linear(s, "tok.conv2", 9 * ch[0], ch[1]);
    add_linear(s, "tok.conv3", 9 * ch[1], ch[2]);
    add_linear(s, "tok.proj", ch[2], cfg.image_embed_dim);
    add_linear(s, "scene_in", cfg.image_embed_dim + cfg.ray_embed_dim, D);
    add_linear(s, "pred_in", cfg.ray_embed_dim + cfg.task_embed_dim + kStateColumns, D);
    for (int b = 0; b < cfg.num_blocks; ++b) {
        const std::string blk = "block" + std::to_string(b);
        add_attention(s, blk + ".read", D, true);
        add_ffn(s, blk + ".read_ffn", D, cfg.ffn_mult);
        for (int l = 0; l < cfg.block_depth; ++l) {
            const std::string layer = blk + ".latent" + std::to_string(l);
            add_attention(s, layer + ".attn", D, false);
            add_ffn(s, layer + ".ffn", D, cfg.ffn_mult);
        }
        add_attention(s, blk + ".write", D, true);
        add_ffn(s, blk + ".write_ffn", D, cfg.ffn_mult);
    }
    add_norm(s, "head.ln", D);
    add_linear(s, "head.rgb", D, 3);
    add_linear(s, "head.depth", D, 1);
    return s;
}

std::size_t parameter_count(const RinConfig& cfg) {
    std::size_t n = 0;
    for (const auto& spec : parameter_specs(cfg)) n += static_cast<std::size_t>(spec.rows) * spec.cols;
    return n;
}

// ---------------------------------------------------------------------------------------------

template <class T>
RinModel<T>::RinModel(const RinConfig& cfg, detail::NoInit) : cfg_(cfg) {
    allocate();
}

template <class T>
RinModel<T>::RinModel(const RinConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    allocate();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (auto& par : params_) {
        const std::string& n = par.name;
        auto ends_with = [&](const char* suffix) {
            const std::string s(suffix);
            return n.size() >= s.size() && n.compare(n.size() - s.size(), s.size(), s) == 0;
        };
        double std_dev = 0.0;
        if (n == "latents" || n.rfind("task.", 0) == 0) {
            std_dev = 1.0;
        } else if (n.rfind("head.rgb", 0) == 0 || n.rfind("head.depth", 0) == 0) {
            std_dev = 0.0;  // fresh models predict zero noise
        } else if (ends_with(".w")) {
            std_dev = 1.0 / std::sqrt(static_cast<double>(par.value.rows()));
            if (ends_with(".o.w") || ends_with(".fc2.w")) std_dev *= 0.5;
        }
        if (ends_with(".g")) {
            par.value.setOnes();
            continue;
        }
        for (Eigen::Index i = 0; i < par.value.size(); ++i)
            par.value.data()[i] = std_dev == 0.0 ? T(0) : static_cast<T>(std_dev * normal(rng));
    }
}

template <class T>
void RinModel<T>::allocate() {
    params_.clear();
    index_.clear();
    for (const auto& spec : parameter_specs(cfg_)) {
        nn::Parameter<T> par;
        par.name = spec.name;
        par.value = Matrix::Zero(spec.rows, spec.cols);
        par.decay = spec.decay;
        index_[spec.name] = params_.size();
        params_.push_back(std::move(par));
    }
}

template <class T>
nn::Parameter<T>& RinModel<T>::param(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("RinModel: no parameter " + name);
    return params_[it->second];
}

template <class T>
const nn::Parameter<T>& RinModel<T>::param(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("RinModel: no parameter " + name);
    return params_[it->second];
}

template <class T>
std::size_t RinModel<T>::parameter_count() const {
    std::size_t n = 0;
    for (const auto& par : params_) n += static_cast<std::size_t>(par.value.size());
    return n;
}

template <class T>
void RinModel<T>::zero_grad() {
    for (auto& par : params_) par.zero_grad();
}

template <class T>
typename RinModel<T>::Var RinModel<T>::p(Tape& tape, const std::string& name) const {
    const auto& par = param(name);
    // Gradient accumulation is the only mutation, and only on recording tapes.
    if (tape.records()) return tape.param(const_cast<nn::Parameter<T>&>(par));
    return tape.param(par);
}

template <class T>
typename RinModel<T>::Var RinModel<T>::tokenize_image(Tape& tape, const ImageF& image) const {
    if (image.channels != 3) throw ConfigError("tokenize_image: expected a 3-channel image");
    const int H = image.height, W = image.width;
    const TokenGrid grid = token_grid(W, H);
    const int Hp = grid.height * 4, Wp = grid.width * 4;
    Matrix x = Matrix::Zero(static_cast<Eigen::Index>(Hp) * Wp, 3);
    for (int y = 0; y < H; ++y)
        for (int xx = 0; xx < W; ++xx)
            for (int c = 0; c < 3; ++c) x(y * Wp + xx, c) = static_cast<T>(image.at(xx, y, c));
    const auto& ch = cfg_.tokenizer_channels;
    Var h = tape.constant(std::move(x));
    h = tape.im2col(h, Hp, Wp, 3, 3, 2, 1);
    h = tape.gelu(tape.linear(h, p(tape, "tok.conv1.w"), p(tape, "tok.conv1.b")));
    h = tape.im2col(h, Hp / 2, Wp / 2, ch[0], 3, 2, 1);
    h = tape.gelu(tape.linear(h, p(tape, "tok.conv2.w"), p(tape, "tok.conv2.b")));
    h = tape.im2col(h, Hp / 4, Wp / 4, ch[1], 3, 1, 1);
    h = tape.gelu(tape.linear(h, p(tape, "tok.conv3.w"), p(tape, "tok.conv3.b")));
    return tape.linear(h, p(tape, "tok.proj.w"), p(tape, "tok.proj.b"));
}

template <class T>
typename RinModel<T>::Matrix RinModel<T>::tokenize_image(const ImageF& image) const {
    Tape tape(false);
    return tape.value(tokenize_image(tape, image));
}

template <class T>
typename RinModel<T>::Var RinModel<T>::embed_scene(Tape& tape, const SceneInput& scene) const {
    tape.set_stage(nn::Stage::Embed);
    if (scene.num_tokens() == 0) throw ConfigError("embed_scene: no scene tokens selected");
    std::vector<Var> rows;
    for (const auto& view : scene.views) {
        if (view.tokens.empty()) continue;
        const TokenGrid grid = token_grid(view.image.width, view.image.height);
        if (view.rays.width != grid.width || view.rays.height != grid.height ||
            view.rays.dim != cfg_.ray_embed_dim)
            throw ConfigError("embed_scene: ray embedding does not match the feature grid");
        Var feats = tape.gather_rows(tokenize_image(tape, view.image), view.tokens);
        Matrix rays(static_cast<Eigen::Index>(view.tokens.size()), cfg_.ray_embed_dim);
        for (std::size_t i = 0; i < view.tokens.size(); ++i)
            for (int c = 0; c < cfg_.ray_embed_dim; ++c)
                rays(i, c) = static_cast<T>(view.rays.row(view.tokens[i])[c]);
        rows.push_back(tape.concat_cols({feats, tape.constant(std::move(rays))}));
    }
    Var tokens = rows.size() == 1 ? rows.front() : tape.concat_rows(rows);
    return tape.linear(tokens, p(tape, "scene_in.w"), p(tape, "scene_in.b"));
}

template <class T>
typename RinModel<T>::Matrix RinModel<T>::embed_scene(const SceneInput& scene) const {
    Tape tape(false);
    return tape.value(embed_scene(tape, scene));
}

template <class T>
void RinModel<T>::check_batch(const PredictionInput& pred) const {
    const auto n = static_cast<Eigen::Index>(pred.tasks.size());
    if (n == 0) throw ConfigError("forward: no prediction tokens");
    if (pred.rays.rows() != n || pred.rays.cols() != cfg_.ray_embed_dim)
        throw ConfigError("forward: prediction ray embedding has the wrong shape");
    if (pred.state.rows() != n || pred.state.cols() != kStateColumns)
        throw ConfigError("forward: prediction state has the wrong shape");
    if (!pred.pixels.empty() && static_cast<Eigen::Index>(pred.pixels.size()) != n)
        throw ConfigError("forward: pixel index list does not match token count");
}

template <class T>
typename RinModel<T>::Var RinModel<T>::attention_block(Tape& tape, const std::string& prefix,
                                                       Var queries, Var context, bool same) const {
    Var qn = tape.layer_norm(queries, p(tape, prefix + ".ln_q.g"), p(tape, prefix + ".ln_q.b"));
    Var kvn = same ? qn
                   : tape.layer_norm(context, p(tape, prefix + ".ln_kv.g"), p(tape, prefix + ".ln_kv.b"));
    Var q = tape.linear(qn, p(tape, prefix + ".q.w"), p(tape, prefix + ".q.b"));
    Var k = tape.linear(kvn, p(tape, prefix + ".k.w"), p(tape, prefix + ".k.b"));
    Var v = tape.linear(kvn, p(tape, prefix + ".v.w"), p(tape, prefix + ".v.b"));
    Var a = tape.attention(q, k, v, cfg_.num_heads);
    return tape.add(queries, tape.linear(a, p(tape, prefix + ".o.w"), p(tape, prefix + ".o.b")));
}

template <class T>
typename RinModel<T>::Var RinModel<T>::ffn_block(Tape& tape, const std::string& prefix, Var x) const {
    Var h = tape.layer_norm(x, p(tape, prefix + ".ln.g"), p(tape, prefix + ".ln.b"));
    h = tape.gelu(tape.linear(h, p(tape, prefix + ".fc1.w"), p(tape, prefix + ".fc1.b")));
    return tape.add(x, tape.linear(h, p(tape, prefix + ".fc2.w"), p(tape, prefix + ".fc2.b")));
}

template <class T>
typename RinModel<T>::Var RinModel<T>::forward(Tape& tape, const TokenBatch& batch) const {
    check_batch(batch.prediction);
    Var scene = embed_scene(tape, batch.scene);
    return forward_with_scene(tape, scene, batch.prediction, batch.timestep);
}

template <class T>
typename RinModel<T>::Var RinModel<T>::forward_with_scene(Tape& tape, Var scene_tokens,
                                                          const PredictionInput& pred,
                                                          double timestep) const {
    check_batch(pred);
    const int D = cfg_.latent_dim;
    if (tape.value(scene_tokens).cols() != D) throw ConfigError("forward: scene tokens have the wrong width");
    const auto n = static_cast<Eigen::Index>(pred.size());
    tape.set_stage(nn::Stage::Embed);

    // Timestep conditioning, shared by latents and prediction tokens.
    Matrix tfeat(1, D);
    const auto tf = timestep_features(timestep, D);
    for (int i = 0; i < D; ++i) tfeat(0, i) = static_cast<T>(tf[i]);
    Var temb = tape.gelu(tape.linear(tape.constant(std::move(tfeat)), p(tape, "time.fc1.w"), p(tape, "time.fc1.b")));
    temb = tape.linear(temb, p(tape, "time.fc2.w"), p(tape, "time.fc2.b"));

    // Prediction tokens: [ray embedding | task embedding | state].
    std::vector<int> task_rows(n);
    Matrix state = pred.state.template cast<T>();
    Matrix mask = Matrix::Zero(n, kStateColumns);
    for (Eigen::Index i = 0; i < n; ++i) {
        const bool rgb = pred.tasks[i] == TaskId::Rgb;
        task_rows[i] = rgb ? 0 : 1;
        for (int c = 0; c < kStateColumns; ++c) {
            const bool active = rgb ? c < 3 : c == kDepthColumn;
            mask(i, c) = active ? T(1) : T(0);
        }
    }
    state = (state.array() * mask.array()).matrix();
    Var task_table = tape.concat_rows({p(tape, "task.rgb"), p(tape, "task.depth")});
    Var pred_in = tape.concat_cols({tape.constant(pred.rays.template cast<T>()),
                                    tape.gather_rows(task_table, task_rows), tape.constant(std::move(state))});
    Var x = tape.add_row(tape.linear(pred_in, p(tape, "pred_in.w"), p(tape, "pred_in.b")), temb);
    Var z = tape.add_row(p(tape, "latents"), temb);

    for (int b = 0; b < cfg_.num_blocks; ++b) {
        const std::string blk = "block" + std::to_string(b);
        tape.set_stage(nn::Stage::Read);
        Var inputs = tape.concat_rows({scene_tokens, x});
        z = attention_block(tape, blk + ".read", z, inputs, false);
        z = ffn_block(tape, blk + ".read_ffn", z);
        tape.set_stage(nn::Stage::Latent);
        for (int l = 0; l < cfg_.block_depth; ++l) {
            const std::string layer = blk + ".latent" + std::to_string(l);
            z = attention_block(tape, layer + ".attn", z, z, true);
            z = ffn_block(tape, layer + ".ffn", z);
        }
        tape.set_stage(nn::Stage::Write);
        x = attention_block(tape, blk + ".write", x, z, false);
        x = ffn_block(tape, blk + ".write_ffn", x);
    }

    tape.set_stage(nn::Stage::Head);
    Var h = tape.layer_norm(x, p(tape, "head.ln.g"), p(tape, "head.ln.b"));
    Var rgb = tape.linear(h, p(tape, "head.rgb.w"), p(tape, "head.rgb.b"));
    Var depth = tape.linear(h, p(tape, "head.depth.w"), p(tape, "head.depth.b"));
    return tape.mul_const(tape.concat_cols({rgb, depth}), std::move(mask));
}

template <class T>
typename RinModel<T>::Matrix RinModel<T>::forward(const TokenBatch& batch, nn::OpCounter* counter) const {
    Tape tape(false);
    tape.set_counter(counter);
    return tape.value(forward(tape, batch));
}

template <class T>
typename RinModel<T>::Matrix RinModel<T>::forward_with_scene(const Matrix& scene_tokens,
                                                             const PredictionInput& pred,
                                                             double timestep,
                                                             nn::OpCounter* counter) const {
    Tape tape(false);
    tape.set_counter(counter);
    Var scene = tape.constant(scene_tokens);
    return tape.value(forward_with_scene(tape, scene, pred, timestep));
}

template <class T>
RinModel<T> RinModel<T>::duplicate_latents() const {
    RinConfig cfg = cfg_;
    cfg.num_latents *= 2;
    RinModel<T> out(cfg, detail::NoInit{});
    for (std::size_t i = 0; i < params_.size(); ++i) {
        if (params_[i].name == "latents") {
            const Matrix& z = params_[i].value;
            Matrix stacked(2 * z.rows(), z.cols());
            stacked.topRows(z.rows()) = z;
            stacked.bottomRows(z.rows()) = z;
            out.params_[i].value = std::move(stacked);
        } else {
            out.params_[i].value = params_[i].value;
        }
    }
    return out;
}

template class RinModel<float>;
template class RinModel<double>;

}  // namespace raydiff
