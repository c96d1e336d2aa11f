#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>

#include "caspian/attention.hpp"
#include "caspian/tensor.hpp"

namespace caspian {

// Attention inserted at a network site. The plain kinds work anywhere; the
// multiscale-bearing kinds (caspian_ms, caspian_pp) need a coarser-scale
// companion input and are valid only on encoder levels 2 and deeper.
enum class AttentionKind {
    none,
    se,
    saam_only,
    saam_caam,
    caspian,
    caspian_mp,
    caspian_ms,
    caspian_pp,
};

AttentionKind attention_kind_from_string(const std::string& name);
std::string to_string(AttentionKind kind);

struct NetConfig {
    int64_t levels = 3;
    int64_t base_channels = 8;
    int64_t in_channels = 4;
    int64_t crop = 32;
    // Encoder placement per level (1-based). Defaulted by defaults():
    // level 1 none, levels 2..L caspian_pp. The bottleneck never carries
    // attention.
    std::map<int64_t, AttentionKind> encoder_attention;
    AttentionKind skip_attention = AttentionKind::caspian;
    AttentionKind decoder_attention = AttentionKind::caspian;
    uint64_t seed = 0;

    static NetConfig defaults(int64_t levels = 3);
    void validate() const;
    int64_t level_channels(int64_t level) const;  // base * 2^(level-1)
};

struct AttentionBlock {
    AttentionKind kind = AttentionKind::none;
    CaspianParams cas;       // caspian
    SeParams se;             // se
    ExcitationParams ch;     // channel branch of the mp/ms/pp variants
    MultiplanarParams mp;    // caspian_mp, caspian_pp
    MultiscaleParams ms;     // caspian_ms, caspian_pp

    static AttentionBlock make(AttentionKind kind, int64_t channels, int64_t coarse_channels,
                               Rng& rng);
    // Shape-preserving. `coarse` is required by the multiscale kinds.
    Tensor apply(const Tensor& x, const Tensor* coarse) const;
    void collect(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix) const;
};

struct ConvUnit {
    Tensor w, b;
};

struct LevelBlock {
    ConvUnit conv1, conv2;
    AttentionBlock attn;
};

struct Model {
    NetConfig config;
    std::vector<LevelBlock> encoder;       // [levels]
    std::vector<AttentionBlock> skips;     // [levels]
    LevelBlock bottleneck;                 // attention always none
    std::vector<LevelBlock> decoder;       // [levels], decoder[i] restores level i+1
    ConvUnit head;                         // 1x1x1 conv to the 3 region logits

    // Every learnable tensor in declaration order, as serialized.
    std::vector<std::pair<std::string, Tensor>> parameters;

    int64_t parameter_count() const;
    void zero_grads();
};

Model build(const NetConfig& config);

// Captures the pre-excitation spatial asymmetry mask (and the feature map) at
// a named site during forward: "encL", "skipL", "decL".
struct ForwardCapture {
    std::string selector;
    Tensor theta;    // [N,1,h,w,d] at the site's resolution
    Tensor feature;  // post-attention feature map at the site
};

// Raw region logits [N,3,S,S,S]. Dropout (channel-wise, after each pooled
// encoder stage and each decoder block) is active only in training mode.
Tensor forward(const Model& model, const Tensor& x, bool training, double dropout_rate, Rng& rng,
               ForwardCapture* capture = nullptr);
// Eval-mode forward.
Tensor forward(const Model& model, const Tensor& x, ForwardCapture* capture = nullptr);

// base * (1 - (e/E)^0.9)
double poly_lr(int64_t epoch, int64_t total_epochs, double base_rate);

// v <- momentum v + grad; p <- p - lr v; gradients cleared.
struct SgdOptimizer {
    explicit SgdOptimizer(double momentum = 0.9) : momentum(momentum) {}
    double momentum;
    std::vector<std::vector<double>> velocity;

    void step(Model& model, double lr);
};

// Checkpoint container: magic "CNET1", the config, then each parameter as
// (name-length u32, name bytes, rank u32, extents u32 each, f64 LE values).
void save_model(const std::filesystem::path& path, const Model& model);
Model load_model(const std::filesystem::path& path);

}  // namespace caspian
