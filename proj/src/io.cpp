#include "cbq/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "cbq/errors.hpp"
#include "cbq/quantizer.hpp"
#include "cbq/rng.hpp"

namespace cbq {

namespace {

constexpr std::uint32_t kTokenMagic = 0x54514243;  // "CBQT"
constexpr std::uint32_t kModelMagic = 0x46514243;  // "CBQF"
constexpr std::uint32_t kQuantMagic = 0x51514243;  // "CBQQ"
constexpr std::uint32_t kFormatVersion = 1;

std::uint64_t fnv1a(const std::uint8_t* p, std::size_t n) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

// little-endian byte buffer
class ByteWriter {
  public:
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u16(std::uint16_t v) {
        for (int i = 0; i < 2; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f64(double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        u64(bits);
    }
    void doubles(const std::vector<double>& v) {
        u64(v.size());
        for (double d : v) f64(d);
    }
    void doubles(std::span<const double> v) {
        u64(v.size());
        for (double d : v) f64(d);
    }
    void bytes(const std::vector<std::uint8_t>& v) {
        u64(v.size());
        buf_.insert(buf_.end(), v.begin(), v.end());
    }
    void finish_with_checksum() { u64(fnv1a(buf_.data(), buf_.size())); }
    const std::vector<std::uint8_t>& buffer() const { return buf_; }

  private:
    std::vector<std::uint8_t> buf_;
};

class ByteReader {
  public:
    explicit ByteReader(std::vector<std::uint8_t> data) : data_(std::move(data)) {}

    std::uint8_t u8() { return take(1)[0]; }
    std::uint16_t u16() { return static_cast<std::uint16_t>(gather(2)); }
    std::uint32_t u32() { return static_cast<std::uint32_t>(gather(4)); }
    std::uint64_t u64() { return gather(8); }
    double f64() {
        const std::uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    std::vector<double> doubles() {
        const std::uint64_t n = u64();
        std::vector<double> v(n);
        for (auto& d : v) d = f64();
        return v;
    }
    std::vector<std::uint8_t> bytes() {
        const std::uint64_t n = u64();
        const std::uint8_t* p = take(n);
        return {p, p + n};
    }
    void verify_checksum() {
        if (data_.size() < 8) throw DataError("file too short for checksum");
        const std::size_t body = data_.size() - 8;
        std::uint64_t stored = 0;
        for (int i = 0; i < 8; ++i) stored |= static_cast<std::uint64_t>(data_[body + i]) << (8 * i);
        if (fnv1a(data_.data(), body) != stored) {
            throw DataError("checksum mismatch: file is corrupted");
        }
        limit_ = body;
    }
    bool at_end() const { return pos_ >= limit_; }

  private:
    std::uint64_t gather(std::size_t n) {
        const std::uint8_t* p = take(n);
        std::uint64_t v = 0;
        for (std::size_t i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
        return v;
    }
    const std::uint8_t* take(std::size_t n) {
        if (pos_ + n > limit_) throw DataError("unexpected end of file");
        const std::uint8_t* p = data_.data() + pos_;
        pos_ += n;
        return p;
    }
    std::vector<std::uint8_t> data_;
    std::size_t pos_ = 0;
    std::size_t limit_ = SIZE_MAX;
};

void write_file(const std::string& path, const std::vector<std::uint8_t>& buf) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!f) throw IoError("write failed for " + path);
}

std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw IoError("cannot open " + path);
    const std::streamsize size = f.tellg();
    f.seekg(0);
    std::vector<std::uint8_t> buf(static_cast<std::size_t>(size));
    f.read(reinterpret_cast<char*>(buf.data()), size);
    if (!f) throw IoError("read failed for " + path);
    return buf;
}

std::vector<double> to_vec(const Tensor& t) {
    return {t.data().begin(), t.data().end()};
}

}  // namespace

// ---- token corpus ----------------------------------------------------------

void write_token_file(const std::string& path, const TokenFile& tf) {
    ByteWriter w;
    w.u32(kTokenMagic);
    w.u32(kFormatVersion);
    w.u32(tf.vocab);
    w.u8(2);  // token width in bytes
    w.u64(tf.tokens.size());
    for (std::uint16_t t : tf.tokens) w.u16(t);
    write_file(path, w.buffer());
}

TokenFile read_token_file(const std::string& path) {
    ByteReader r(read_file(path));
    if (r.u32() != kTokenMagic) throw DataError(path + " is not a token file");
    if (r.u32() != kFormatVersion) throw DataError("unsupported token file version");
    TokenFile tf;
    tf.vocab = r.u32();
    if (r.u8() != 2) throw DataError("unsupported token width");
    const std::uint64_t n = r.u64();
    tf.tokens.resize(n);
    for (auto& t : tf.tokens) {
        t = r.u16();
        if (t >= tf.vocab) throw DataError("token id exceeds vocabulary");
    }
    return tf;
}

std::vector<std::uint16_t> generate_corpus(std::size_t count, std::size_t vocab,
                                           std::uint64_t seed) {
    if (vocab < 4) throw ConfigError("corpus vocabulary too small");
    Rng rng(seed);

    // Zipf-ish unigram table over a shuffled rank order
    std::vector<double> cdf(vocab);
    double z = 0.0;
    for (std::size_t r = 0; r < vocab; ++r) {
        z += 1.0 / std::pow(static_cast<double>(r + 2), 1.1);
        cdf[r] = z;
    }
    for (auto& c : cdf) c /= z;
    auto zipf_draw = [&]() {
        const double u = rng.uniform();
        return static_cast<std::uint16_t>(
            std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
    };

    // three-way successor structure per token
    const std::size_t a1 = 31, c1 = 7, a2 = 17, c2 = 101, a3 = 5, c3 = 401;
    std::vector<std::uint16_t> out;
    out.reserve(count);
    std::uint16_t prev = zipf_draw();
    out.push_back(prev);
    while (out.size() < count) {
        const double u = rng.uniform();
        std::uint16_t next;
        if (u < 0.5) {
            next = static_cast<std::uint16_t>((a1 * prev + c1) % vocab);
        } else if (u < 0.75) {
            next = static_cast<std::uint16_t>((a2 * prev + c2) % vocab);
        } else if (u < 0.9) {
            next = static_cast<std::uint16_t>((a3 * prev + c3) % vocab);
        } else {
            next = zipf_draw();
        }
        out.push_back(next);
        prev = next;
    }
    return out;
}

CalibrationSet load_calibration(const std::string& path, std::size_t s, std::size_t n,
                                std::uint64_t seed) {
    const TokenFile tf = read_token_file(path);
    if (s < 2) throw ConfigError("segment length must be at least 2");
    if (tf.tokens.size() < s) {
        throw DataError("token stream of " + std::to_string(tf.tokens.size()) +
                        " tokens cannot provide segments of length " + std::to_string(s));
    }
    CalibrationSet cs;
    cs.seq_len = s;
    cs.seed = seed;
    cs.source = path;
    Rng rng(seed);
    const std::size_t span = tf.tokens.size() - s + 1;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t off = rng.index(span);
        std::vector<int> seq(s);
        for (std::size_t j = 0; j < s; ++j) seq[j] = tf.tokens[off + j];
        cs.sequences.push_back(std::move(seq));
    }
    return cs;
}

std::vector<std::vector<int>> eval_segments(const std::string& path, std::size_t s,
                                            std::size_t max_segments) {
    const TokenFile tf = read_token_file(path);
    if (tf.tokens.size() < s) throw DataError("eval stream shorter than one segment");
    std::vector<std::vector<int>> segs;
    for (std::size_t off = 0; off + s <= tf.tokens.size() && segs.size() < max_segments; off += s) {
        std::vector<int> seq(s);
        for (std::size_t j = 0; j < s; ++j) seq[j] = tf.tokens[off + j];
        segs.push_back(std::move(seq));
    }
    if (segs.empty()) throw DataError("empty evaluation set");
    return segs;
}

// ---- floating-point checkpoint ----------------------------------------------

void save_model(const std::string& path, const ToyModel& m) {
    ByteWriter w;
    w.u32(kModelMagic);
    w.u32(kFormatVersion);
    w.u32(static_cast<std::uint32_t>(m.config.blocks));
    w.u32(static_cast<std::uint32_t>(m.config.hidden));
    w.u32(static_cast<std::uint32_t>(m.config.heads));
    w.u32(static_cast<std::uint32_t>(m.config.vocab));
    w.u32(static_cast<std::uint32_t>(m.config.max_seq));
    for (auto& p : const_cast<ToyModel&>(m).all_params()) w.doubles(p.data());
    w.finish_with_checksum();
    write_file(path, w.buffer());
}

ToyModel load_model(const std::string& path) {
    ByteReader r(read_file(path));
    r.verify_checksum();
    if (r.u32() != kModelMagic) throw DataError(path + " is not a model checkpoint");
    if (r.u32() != kFormatVersion) throw DataError("unsupported model checkpoint version");
    ModelConfig cfg;
    cfg.blocks = r.u32();
    cfg.hidden = r.u32();
    cfg.heads = r.u32();
    cfg.vocab = r.u32();
    cfg.max_seq = r.u32();
    Rng rng(0);
    ToyModel m = init_model(cfg, rng, false);
    for (auto& p : m.all_params()) {
        const std::vector<double> v = r.doubles();
        if (v.size() != p.numel()) throw DataError("checkpoint tensor size mismatch");
        std::copy(v.begin(), v.end(), p.data().begin());
    }
    return m;
}

// ---- quantized checkpoint ----------------------------------------------------

namespace {

std::vector<std::uint8_t> pack_codes(const std::vector<std::int32_t>& codes, int bits) {
    const std::int32_t qmin = -(1 << (bits - 1));
    std::vector<std::uint8_t> out;
    if (bits <= 4) {
        out.resize((codes.size() + 1) / 2, 0);
        for (std::size_t i = 0; i < codes.size(); ++i) {
            const auto u = static_cast<std::uint8_t>(codes[i] - qmin);
            out[i / 2] |= static_cast<std::uint8_t>((u & 0x0f) << (4 * (i % 2)));
        }
    } else if (bits <= 8) {
        out.resize(codes.size());
        for (std::size_t i = 0; i < codes.size(); ++i) {
            out[i] = static_cast<std::uint8_t>(codes[i] - qmin);
        }
    } else {
        out.resize(codes.size() * 2);
        for (std::size_t i = 0; i < codes.size(); ++i) {
            const auto u = static_cast<std::uint16_t>(codes[i] - qmin);
            out[i * 2] = static_cast<std::uint8_t>(u & 0xff);
            out[i * 2 + 1] = static_cast<std::uint8_t>(u >> 8);
        }
    }
    return out;
}

std::vector<std::int32_t> unpack_codes(const std::vector<std::uint8_t>& packed, std::size_t count,
                                       int bits) {
    const std::int32_t qmin = -(1 << (bits - 1));
    std::vector<std::int32_t> codes(count);
    if (bits <= 4) {
        if (packed.size() != (count + 1) / 2) throw DataError("packed code size mismatch");
        for (std::size_t i = 0; i < count; ++i) {
            codes[i] = ((packed[i / 2] >> (4 * (i % 2))) & 0x0f) + qmin;
        }
    } else if (bits <= 8) {
        if (packed.size() != count) throw DataError("packed code size mismatch");
        for (std::size_t i = 0; i < count; ++i) codes[i] = packed[i] + qmin;
    } else {
        if (packed.size() != count * 2) throw DataError("packed code size mismatch");
        for (std::size_t i = 0; i < count; ++i) {
            codes[i] = static_cast<std::int32_t>(packed[i * 2] | (packed[i * 2 + 1] << 8)) + qmin;
        }
    }
    return codes;
}

}  // namespace

void save_quantized(const std::string& path, const PipelineResult& result, int bits_w,
                    int bits_a) {
    const ToyModel& m = result.q_model;
    ByteWriter w;
    w.u32(kQuantMagic);
    w.u32(kFormatVersion);
    w.u32(static_cast<std::uint32_t>(m.config.blocks));
    w.u32(static_cast<std::uint32_t>(m.config.hidden));
    w.u32(static_cast<std::uint32_t>(m.config.heads));
    w.u32(static_cast<std::uint32_t>(m.config.vocab));
    w.u32(static_cast<std::uint32_t>(m.config.max_seq));
    w.u32(static_cast<std::uint32_t>(bits_w));
    w.u32(static_cast<std::uint32_t>(bits_a));
    w.doubles(m.tok_emb.data());
    w.doubles(m.pos_emb.data());
    w.doubles(m.lnf_g.data());
    w.doubles(m.lnf_b.data());
    w.doubles(m.w_head.data());
    w.doubles(m.b_head.data());

    for (std::size_t b = 0; b < m.config.blocks; ++b) {
        const auto& blk = m.blocks[b];
        for (const Tensor* t : {&blk.ln1_g, &blk.ln1_b, &blk.bq, &blk.bk, &blk.bv, &blk.bo,
                                &blk.ln2_g, &blk.ln2_b, &blk.b_up, &blk.b_down}) {
            w.doubles(t->data());
        }
        for (Site s : kAllSites) {
            const auto& sq = result.bindings.blocks[b][static_cast<std::size_t>(s)];
            const Tensor& weight = blk.weight(s);
            w.u32(static_cast<std::uint32_t>(weight.shape()[0]));
            w.u32(static_cast<std::uint32_t>(weight.shape()[1]));

            // binarized compensation folded onto the lattice
            std::vector<double> comp_bin;
            const std::vector<double>* comp_ptr = nullptr;
            if (sq.comp) {
                Tensor a = compensation_matrix(*sq.comp);
                comp_bin.assign(a.data().begin(), a.data().end());
                for (double& v : comp_bin) v = v >= 0.5 ? 1.0 : 0.0;
                comp_ptr = &comp_bin;
            }
            const IntTensor codes = integer_codes(weight, sq.w_state, sq.w_spec, comp_ptr);
            w.doubles(sq.w_state.step.data());
            w.u8(sq.x_spec.granularity == Granularity::PerChannel ? 1 : 0);
            w.doubles(sq.x_state.step.data());
            w.doubles(sq.act_scale.defined() ? to_vec(sq.act_scale) : std::vector<double>{});

            const SitePrep* prep = nullptr;
            for (const auto& p : result.prep) {
                if (p.block == b && p.site == s) prep = &p;
            }
            w.u64(prep ? prep->weights_truncated : 0);
            w.f64(prep ? prep->weight_trigger : 0.0);
            w.f64(prep ? prep->weight_cap : 0.0);
            w.u64(codes.values.size());
            w.bytes(pack_codes(codes.values, bits_w));
        }
    }
    w.finish_with_checksum();
    write_file(path, w.buffer());
}

QuantizedCheckpoint load_quantized(const std::string& path) {
    ByteReader r(read_file(path));
    r.verify_checksum();
    if (r.u32() != kQuantMagic) throw DataError(path + " is not a quantized checkpoint");
    if (r.u32() != kFormatVersion) throw DataError("unsupported checkpoint version");
    QuantizedCheckpoint ck;
    ck.config.blocks = r.u32();
    ck.config.hidden = r.u32();
    ck.config.heads = r.u32();
    ck.config.vocab = r.u32();
    ck.config.max_seq = r.u32();
    ck.bits_w = static_cast<std::int32_t>(r.u32());
    ck.bits_a = static_cast<std::int32_t>(r.u32());
    ck.tok_emb = r.doubles();
    ck.pos_emb = r.doubles();
    ck.lnf_g = r.doubles();
    ck.lnf_b = r.doubles();
    ck.w_head = r.doubles();
    ck.b_head = r.doubles();
    for (std::size_t b = 0; b < ck.config.blocks; ++b) {
        QuantBlockFp fp;
        for (std::vector<double>* t : {&fp.ln1_g, &fp.ln1_b, &fp.bq, &fp.bk, &fp.bv, &fp.bo,
                                       &fp.ln2_g, &fp.ln2_b, &fp.b_up, &fp.b_down}) {
            *t = r.doubles();
        }
        ck.block_fp.push_back(std::move(fp));
        std::array<QuantSiteRecord, kSiteCount> sites;
        for (std::size_t s = 0; s < kSiteCount; ++s) {
            QuantSiteRecord rec;
            rec.rows = r.u32();
            rec.cols = r.u32();
            rec.w_steps = r.doubles();
            rec.x_granularity = r.u8();
            rec.x_steps = r.doubles();
            rec.act_scales = r.doubles();
            rec.weights_truncated = r.u64();
            rec.weight_trigger = r.f64();
            rec.weight_cap = r.f64();
            const std::uint64_t count = r.u64();
            rec.codes = unpack_codes(r.bytes(), count, ck.bits_w);
            sites[s] = std::move(rec);
        }
        ck.sites.push_back(std::move(sites));
    }
    return ck;
}

std::pair<ToyModel, QuantBindings> instantiate_checkpoint(const QuantizedCheckpoint& ck) {
    Rng rng(0);
    ToyModel m = init_model(ck.config, rng, false);
    auto assign = [](Tensor& t, const std::vector<double>& v) {
        if (t.numel() != v.size()) throw DataError("checkpoint tensor size mismatch");
        std::copy(v.begin(), v.end(), t.data().begin());
    };
    assign(m.tok_emb, ck.tok_emb);
    assign(m.pos_emb, ck.pos_emb);
    assign(m.lnf_g, ck.lnf_g);
    assign(m.lnf_b, ck.lnf_b);
    assign(m.w_head, ck.w_head);
    assign(m.b_head, ck.b_head);

    QuantBindings bindings;
    bindings.blocks.resize(ck.config.blocks);
    for (std::size_t b = 0; b < ck.config.blocks; ++b) {
        auto& blk = m.blocks[b];
        const auto& fp = ck.block_fp[b];
        assign(blk.ln1_g, fp.ln1_g);
        assign(blk.ln1_b, fp.ln1_b);
        assign(blk.bq, fp.bq);
        assign(blk.bk, fp.bk);
        assign(blk.bv, fp.bv);
        assign(blk.bo, fp.bo);
        assign(blk.ln2_g, fp.ln2_g);
        assign(blk.ln2_b, fp.ln2_b);
        assign(blk.b_up, fp.b_up);
        assign(blk.b_down, fp.b_down);
        for (Site s : kAllSites) {
            const auto& rec = ck.sites[b][static_cast<std::size_t>(s)];
            Tensor& weight = blk.weight(s);
            if (weight.numel() != rec.codes.size()) {
                throw DataError("code count does not match weight shape");
            }
            // dequantize: per-tensor weight steps
            auto wd = weight.data();
            const QuantSpec wspec = weight_spec(ck.bits_w);
            for (std::size_t i = 0; i < wd.size(); ++i) {
                const double step = rec.w_steps[quant_group_of(weight.shape(), wspec, i)];
                wd[i] = step * rec.codes[i];
            }
            auto& sq = bindings.blocks[b][static_cast<std::size_t>(s)];
            sq.x_spec = act_spec(ck.bits_a,
                                 rec.x_granularity ? Granularity::PerChannel
                                                   : Granularity::PerTensor,
                                 1);
            const std::size_t nsteps = rec.x_steps.size();
            sq.x_state =
                QuantState{Tensor::from(std::vector<double>(rec.x_steps), {nsteps}, false)};
            if (!rec.act_scales.empty()) {
                sq.act_scale = Tensor::from(std::vector<double>(rec.act_scales),
                                            {rec.act_scales.size()}, false);
            }
            // weights stay dequantized: leave w_state undefined
        }
    }
    return {std::move(m), std::move(bindings)};
}

// ---- evaluation ---------------------------------------------------------------

double sequence_nll(const Tensor& logits, const std::vector<int>& tokens,
                    std::size_t& predictions) {
    const std::size_t t = logits.shape()[0], v = logits.shape()[1];
    if (tokens.size() != t) throw DataError("token count does not match logits");
    const double* pl = logits.data().data();
    double total = 0.0;
    for (std::size_t i = 0; i + 1 < t; ++i) {
        const double* x = pl + i * v;
        double mx = x[0];
        for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, x[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < v; ++j) z += std::exp(x[j] - mx);
        total += std::log(z) + mx - x[tokens[i + 1]];
        ++predictions;
    }
    return total;
}

double evaluate_perplexity(const ToyModel& m, const QuantBindings* bindings,
                           const std::vector<std::vector<int>>& sequences) {
    if (sequences.empty()) throw DataError("empty evaluation set");
    double total = 0.0;
    std::size_t predictions = 0;
    for (const auto& seq : sequences) {
        Tensor logits = model_forward(m, seq, bindings);
        total += sequence_nll(logits, seq, predictions);
    }
    if (predictions == 0) throw DataError("evaluation set yields no predictions");
    return std::exp(total / static_cast<double>(predictions));
}

}  // namespace cbq
