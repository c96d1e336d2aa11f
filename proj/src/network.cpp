#include "caspian/network.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace caspian {

namespace {

const char* kKindNames[] = {"none",    "se",         "saam_only",  "saam_caam",
                            "caspian", "caspian_mp", "caspian_ms", "caspian_pp"};

bool needs_coarse(AttentionKind kind) {
    return kind == AttentionKind::caspian_ms || kind == AttentionKind::caspian_pp;
}

Tensor conv_unit_init_w(int64_t out_ch, int64_t in_ch, int64_t k, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_ch * k * k * k));
    return Tensor::uniform({out_ch, in_ch, k, k, k}, -bound, bound, rng, true);
}

ConvUnit make_conv(int64_t out_ch, int64_t in_ch, int64_t k, Rng& rng) {
    return ConvUnit{conv_unit_init_w(out_ch, in_ch, k, rng), Tensor::zeros({out_ch}, true)};
}

Tensor conv_norm_relu(const Tensor& x, const ConvUnit& u) {
    return relu(instance_norm(conv3d(x, u.w, u.b, 1, 1)));
}

Tensor channel_weights(const Tensor& per_channel) {
    return reshape(per_channel, {per_channel.shape()[0], per_channel.shape()[1], 1, 1, 1});
}

void collect_excitation(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix,
                        const ExcitationParams& p) {
    out.emplace_back(prefix + ".w1", p.w1);
    out.emplace_back(prefix + ".b1", p.b1);
    out.emplace_back(prefix + ".w2", p.w2);
    out.emplace_back(prefix + ".b2", p.b2);
}

}  // namespace

AttentionKind attention_kind_from_string(const std::string& name) {
    for (size_t i = 0; i < std::size(kKindNames); ++i)
        if (name == kKindNames[i]) return static_cast<AttentionKind>(i);
    throw std::invalid_argument("unknown attention kind: " + name);
}

std::string to_string(AttentionKind kind) { return kKindNames[static_cast<size_t>(kind)]; }

NetConfig NetConfig::defaults(int64_t levels) {
    NetConfig c;
    c.levels = levels;
    for (int64_t level = 1; level <= levels; ++level)
        c.encoder_attention[level] = level == 1 ? AttentionKind::none : AttentionKind::caspian_pp;
    return c;
}

int64_t NetConfig::level_channels(int64_t level) const {
    return base_channels << (level - 1);
}

void NetConfig::validate() const {
    if (levels < 2) throw std::invalid_argument("NetConfig: levels must be at least 2");
    if (base_channels < 1 || in_channels < 1)
        throw std::invalid_argument("NetConfig: channel counts must be positive");
    if (crop < (int64_t{1} << levels) || crop % (int64_t{1} << levels) != 0)
        throw std::invalid_argument("NetConfig: crop must be divisible by 2^levels");
    for (const auto& [level, kind] : encoder_attention) {
        if (level < 1 || level > levels)
            throw std::invalid_argument("NetConfig: placement level " + std::to_string(level) +
                                        " out of range");
        if (level == 1 && needs_coarse(kind))
            throw std::invalid_argument(
                "NetConfig: multiscale attention on encoder level 1 is rejected (no coarser "
                "companion scale exists there)");
    }
    if (needs_coarse(skip_attention) || needs_coarse(decoder_attention))
        throw std::invalid_argument(
            "NetConfig: skip/decoder sites have no coarser companion scale; "
            "multiscale kinds are encoder-only");
}

AttentionBlock AttentionBlock::make(AttentionKind kind, int64_t channels, int64_t coarse_channels,
                                    Rng& rng) {
    AttentionBlock b;
    b.kind = kind;
    switch (kind) {
        case AttentionKind::none:
        case AttentionKind::saam_only:
        case AttentionKind::saam_caam:
            break;
        case AttentionKind::se:
            b.se = SeParams::init(channels, rng);
            break;
        case AttentionKind::caspian:
            b.cas = CaspianParams::init(channels, rng);
            break;
        case AttentionKind::caspian_mp:
            b.ch = ExcitationParams::channel(channels, rng);
            b.mp = MultiplanarParams::init(rng);
            break;
        case AttentionKind::caspian_ms:
            b.ch = ExcitationParams::channel(channels, rng);
            b.ms = MultiscaleParams::init(channels, coarse_channels, rng);
            break;
        case AttentionKind::caspian_pp: {
            auto pp = CaspianPPParams::init(channels, coarse_channels, rng);
            b.ch = pp.ch;
            b.ms = pp.ms;
            b.mp = pp.mp;
            break;
        }
    }
    return b;
}

Tensor AttentionBlock::apply(const Tensor& x, const Tensor* coarse) const {
    switch (kind) {
        case AttentionKind::none:
            return x;
        case AttentionKind::se:
            return se_baseline(x, se);
        case AttentionKind::saam_only:
            return saam_only(x);
        case AttentionKind::saam_caam:
            return saam_caam(x);
        case AttentionKind::caspian:
            return ::caspian::caspian(x, cas);
        case AttentionKind::caspian_mp: {
            const Tensor q_ch = mul(channel_weights(excite(caam(x), ch)), x);
            return add(q_ch, multiplanar(x, mp));
        }
        case AttentionKind::caspian_ms: {
            if (!coarse) throw std::invalid_argument("caspian_ms: missing coarse input");
            const Tensor q_ch = mul(channel_weights(excite(caam(x), ch)), x);
            return add(q_ch, multiscale(x, *coarse, ms));
        }
        case AttentionKind::caspian_pp: {
            if (!coarse) throw std::invalid_argument("caspian_pp: missing coarse input");
            return caspian_pp(x, *coarse, CaspianPPParams{ch, ms, mp});
        }
    }
    throw std::logic_error("AttentionBlock: unhandled kind");
}

void AttentionBlock::collect(std::vector<std::pair<std::string, Tensor>>& out,
                             const std::string& prefix) const {
    switch (kind) {
        case AttentionKind::none:
        case AttentionKind::saam_only:
        case AttentionKind::saam_caam:
            return;
        case AttentionKind::se:
            collect_excitation(out, prefix + ".se", se.ch);
            return;
        case AttentionKind::caspian:
            collect_excitation(out, prefix + ".sp", cas.sp);
            collect_excitation(out, prefix + ".ch", cas.ch);
            return;
        case AttentionKind::caspian_mp:
            collect_excitation(out, prefix + ".ch", ch);
            for (int p = 0; p < 3; ++p)
                collect_excitation(out, prefix + ".mp" + std::to_string(p + 1), mp.sp[p]);
            return;
        case AttentionKind::caspian_ms:
        case AttentionKind::caspian_pp:
            collect_excitation(out, prefix + ".ch", ch);
            collect_excitation(out, prefix + ".ms_fine", ms.sp_fine);
            collect_excitation(out, prefix + ".ms_coarse", ms.sp_coarse);
            if (ms.proj_w.defined()) {
                out.emplace_back(prefix + ".ms_proj.w", ms.proj_w);
                out.emplace_back(prefix + ".ms_proj.b", ms.proj_b);
            }
            if (kind == AttentionKind::caspian_pp)
                for (int p = 0; p < 3; ++p)
                    collect_excitation(out, prefix + ".mp" + std::to_string(p + 1), mp.sp[p]);
            return;
    }
}

Model build(const NetConfig& config) {
    config.validate();
    Rng rng(config.seed);
    Model m;
    m.config = config;

    auto kind_at = [&](int64_t level) {
        auto it = config.encoder_attention.find(level);
        return it == config.encoder_attention.end() ? AttentionKind::none : it->second;
    };
    // Channel count of the tensor entering encoder level L.
    auto level_input_channels = [&](int64_t level) {
        return level == 1 ? config.in_channels : config.level_channels(level - 1);
    };

    for (int64_t level = 1; level <= config.levels; ++level) {
        const int64_t c = config.level_channels(level);
        LevelBlock block;
        block.conv1 = make_conv(c, level_input_channels(level), 3, rng);
        block.attn = AttentionBlock::make(kind_at(level), c,
                                          level > 1 ? level_input_channels(level - 1) : 0, rng);
        block.conv2 = make_conv(c, c, 3, rng);
        m.encoder.push_back(block);
        m.skips.push_back(AttentionBlock::make(config.skip_attention, c, 0, rng));
    }

    const int64_t bn_in = config.level_channels(config.levels);
    const int64_t bn_c = config.base_channels << config.levels;
    m.bottleneck.conv1 = make_conv(bn_c, bn_in, 3, rng);
    m.bottleneck.conv2 = make_conv(bn_c, bn_c, 3, rng);

    for (int64_t level = config.levels; level >= 1; --level) {
        const int64_t c = config.level_channels(level);
        const int64_t up_c = level == config.levels ? bn_c : config.level_channels(level + 1);
        LevelBlock block;
        block.conv1 = make_conv(c, up_c + c, 3, rng);
        block.attn = AttentionBlock::make(config.decoder_attention, c, 0, rng);
        block.conv2 = make_conv(c, c, 3, rng);
        m.decoder.push_back(block);
    }

    m.head = make_conv(3, config.base_channels, 1, rng);

    for (int64_t level = 1; level <= config.levels; ++level) {
        const auto tag = std::to_string(level);
        const auto& e = m.encoder[level - 1];
        m.parameters.emplace_back("enc" + tag + ".conv1.w", e.conv1.w);
        m.parameters.emplace_back("enc" + tag + ".conv1.b", e.conv1.b);
        e.attn.collect(m.parameters, "enc" + tag + ".attn");
        m.parameters.emplace_back("enc" + tag + ".conv2.w", e.conv2.w);
        m.parameters.emplace_back("enc" + tag + ".conv2.b", e.conv2.b);
        m.skips[level - 1].collect(m.parameters, "skip" + tag + ".attn");
    }
    m.parameters.emplace_back("bn.conv1.w", m.bottleneck.conv1.w);
    m.parameters.emplace_back("bn.conv1.b", m.bottleneck.conv1.b);
    m.parameters.emplace_back("bn.conv2.w", m.bottleneck.conv2.w);
    m.parameters.emplace_back("bn.conv2.b", m.bottleneck.conv2.b);
    for (int64_t level = config.levels; level >= 1; --level) {
        const auto tag = std::to_string(level);
        const auto& d = m.decoder[config.levels - level];
        m.parameters.emplace_back("dec" + tag + ".conv1.w", d.conv1.w);
        m.parameters.emplace_back("dec" + tag + ".conv1.b", d.conv1.b);
        d.attn.collect(m.parameters, "dec" + tag + ".attn");
        m.parameters.emplace_back("dec" + tag + ".conv2.w", d.conv2.w);
        m.parameters.emplace_back("dec" + tag + ".conv2.b", d.conv2.b);
    }
    m.parameters.emplace_back("head.w", m.head.w);
    m.parameters.emplace_back("head.b", m.head.b);
    return m;
}

int64_t Model::parameter_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : parameters) n += t.numel();
    return n;
}

void Model::zero_grads() {
    for (auto& [name, t] : parameters) t.zero_grad();
}

Tensor forward(const Model& model, const Tensor& x, bool training, double dropout_rate, Rng& rng,
               ForwardCapture* capture) {
    const NetConfig& cfg = model.config;
    if (x.rank() != 5 || x.shape()[1] != cfg.in_channels)
        throw std::invalid_argument("forward: input must be [N," + std::to_string(cfg.in_channels) +
                                    ",S,S,S]");
    for (int64_t d = 2; d < 5; ++d)
        if (x.shape()[d] != cfg.crop)
            throw std::invalid_argument("forward: input extent " + std::to_string(x.shape()[d]) +
                                        " does not match crop " + std::to_string(cfg.crop));

    auto grab = [&](const std::string& site, const Tensor& input, const Tensor& output) {
        if (capture && capture->selector == site) {
            capture->theta = saam(input).values;
            capture->feature = output;
        }
    };

    std::vector<Tensor> level_inputs;  // input tensor of each encoder level
    std::vector<Tensor> skip_features;
    Tensor t = x;
    for (int64_t level = 1; level <= cfg.levels; ++level) {
        const auto& block = model.encoder[level - 1];
        level_inputs.push_back(t);
        Tensor mid = conv_norm_relu(t, block.conv1);
        const Tensor* coarse = level > 1 ? &level_inputs[level - 2] : nullptr;
        Tensor attended = block.attn.apply(mid, coarse);
        grab("enc" + std::to_string(level), mid, attended);
        Tensor out = conv_norm_relu(attended, block.conv2);

        Tensor skip = model.skips[level - 1].apply(out, nullptr);
        grab("skip" + std::to_string(level), out, skip);
        skip_features.push_back(skip);

        t = maxpool3d(out, 2, 2);
        if (training && dropout_rate > 0.0) t = dropout(t, dropout_rate, rng, true);
    }

    t = conv_norm_relu(t, model.bottleneck.conv1);
    t = conv_norm_relu(t, model.bottleneck.conv2);

    for (int64_t level = cfg.levels; level >= 1; --level) {
        const auto& block = model.decoder[cfg.levels - level];
        t = concat(upsample_nn2x(t), skip_features[level - 1], 1);
        Tensor mid = conv_norm_relu(t, block.conv1);
        Tensor attended = block.attn.apply(mid, nullptr);
        grab("dec" + std::to_string(level), mid, attended);
        t = conv_norm_relu(attended, block.conv2);
        if (training && dropout_rate > 0.0) t = dropout(t, dropout_rate, rng, true);
    }

    return conv3d(t, model.head.w, model.head.b, 1, 0);
}

Tensor forward(const Model& model, const Tensor& x, ForwardCapture* capture) {
    Rng unused(0);
    return forward(model, x, false, 0.0, unused, capture);
}

double poly_lr(int64_t epoch, int64_t total_epochs, double base_rate) {
    if (total_epochs <= 0) throw std::invalid_argument("poly_lr: total epochs must be positive");
    if (epoch < 0 || epoch > total_epochs)
        throw std::invalid_argument("poly_lr: epoch " + std::to_string(epoch) +
                                    " outside [0," + std::to_string(total_epochs) + "]");
    const double progress = static_cast<double>(epoch) / static_cast<double>(total_epochs);
    return base_rate * (1.0 - std::pow(progress, 0.9));
}

void SgdOptimizer::step(Model& model, double lr) {
    if (velocity.empty()) {
        velocity.resize(model.parameters.size());
        for (size_t i = 0; i < velocity.size(); ++i)
            velocity[i].assign(model.parameters[i].second.numel(), 0.0);
    }
    if (velocity.size() != model.parameters.size())
        throw std::invalid_argument("SgdOptimizer: model parameter set changed");

    for (size_t i = 0; i < model.parameters.size(); ++i) {
        Tensor& p = model.parameters[i].second;
        if (!p.has_grad())
            throw std::runtime_error("SgdOptimizer: parameter " + model.parameters[i].first +
                                     " has no gradient");
        auto& v = velocity[i];
        auto& data = p.mutable_data();
        const auto& g = p.grad();
        for (size_t j = 0; j < v.size(); ++j) {
            v[j] = momentum * v[j] + g[j];
            data[j] -= lr * v[j];
        }
        p.zero_grad();
    }
}

// ---------------------------------------------------------------------------
// checkpoint io
// ---------------------------------------------------------------------------

namespace {

constexpr char kNetMagic[5] = {'C', 'N', 'E', 'T', '1'};

void put_u32(std::ostream& os, uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, uint64_t v) {
    put_u32(os, static_cast<uint32_t>(v));
    put_u32(os, static_cast<uint32_t>(v >> 32));
}

void put_f64(std::ostream& os, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(os, bits);
}

uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4))
        throw std::runtime_error("checkpoint: truncated file");
    return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 |
           static_cast<uint32_t>(b[2]) << 16 | static_cast<uint32_t>(b[3]) << 24;
}

uint64_t get_u64(std::istream& is) {
    const uint64_t lo = get_u32(is);
    const uint64_t hi = get_u32(is);
    return lo | hi << 32;
}

double get_f64(std::istream& is) {
    const uint64_t bits = get_u64(is);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

}  // namespace

void save_model(const std::filesystem::path& path, const Model& model) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("checkpoint: cannot open " + path.string() + " for writing");
    os.write(kNetMagic, 5);
    const NetConfig& c = model.config;
    put_u32(os, static_cast<uint32_t>(c.levels));
    put_u32(os, static_cast<uint32_t>(c.base_channels));
    put_u32(os, static_cast<uint32_t>(c.in_channels));
    put_u32(os, static_cast<uint32_t>(c.crop));
    put_u64(os, c.seed);
    put_u32(os, static_cast<uint32_t>(c.encoder_attention.size()));
    for (const auto& [level, kind] : c.encoder_attention) {
        put_u32(os, static_cast<uint32_t>(level));
        os.put(static_cast<char>(kind));
    }
    os.put(static_cast<char>(c.skip_attention));
    os.put(static_cast<char>(c.decoder_attention));

    put_u32(os, static_cast<uint32_t>(model.parameters.size()));
    for (const auto& [name, t] : model.parameters) {
        put_u32(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        put_u32(os, static_cast<uint32_t>(t.shape().size()));
        for (int64_t e : t.shape()) put_u32(os, static_cast<uint32_t>(e));
        for (double v : t.data()) put_f64(os, v);
    }
    if (!os) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

Model load_model(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open " + path.string());
    char magic[5];
    if (!is.read(magic, 5) || std::memcmp(magic, kNetMagic, 5) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path.string());

    NetConfig c;
    c.levels = get_u32(is);
    c.base_channels = get_u32(is);
    c.in_channels = get_u32(is);
    c.crop = get_u32(is);
    c.seed = get_u64(is);
    const uint32_t placements = get_u32(is);
    for (uint32_t i = 0; i < placements; ++i) {
        const int64_t level = get_u32(is);
        c.encoder_attention[level] = static_cast<AttentionKind>(is.get());
    }
    c.skip_attention = static_cast<AttentionKind>(is.get());
    c.decoder_attention = static_cast<AttentionKind>(is.get());

    Model model = build(c);
    const uint32_t count = get_u32(is);
    if (count != model.parameters.size())
        throw std::runtime_error("checkpoint: parameter count mismatch in " + path.string());
    for (auto& [name, t] : model.parameters) {
        const uint32_t name_len = get_u32(is);
        std::string stored(name_len, '\0');
        if (!is.read(stored.data(), name_len))
            throw std::runtime_error("checkpoint: truncated file");
        if (stored != name)
            throw std::runtime_error("checkpoint: parameter order mismatch, expected " + name +
                                     ", found " + stored);
        const uint32_t rank = get_u32(is);
        Shape shape(rank);
        for (auto& e : shape) e = get_u32(is);
        if (shape != t.shape())
            throw std::runtime_error("checkpoint: shape mismatch for " + name);
        for (auto& v : t.mutable_data()) v = get_f64(is);
    }
    is.peek();
    if (!is.eof()) throw std::runtime_error("checkpoint: trailing bytes in " + path.string());
    return model;
}

}  // namespace caspian
