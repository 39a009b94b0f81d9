// Acceptance suite: every release gate in one binary, one line per gate.
// Exit status is the number of failed gates.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "ikv/harness.hpp"
#include "cli_util.hpp"
#include "model_util.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace ikv;

namespace {

struct Failure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void require(bool ok, const std::string& what) {
    if (!ok) throw Failure(what);
}

const Model& canonical_fp() {
    static Model m = make_sink_model();  // seed 42, sink token 0, scale 1e3
    return m;
}

Model canonical_q(int bits = 3, std::size_t group = 16) {
    QuantConfig qc;
    qc.bits = bits;
    qc.group_size = group;
    return quantize_model_weights(canonical_fp(), qc);
}

const std::vector<CorpusSequence>& canonical_corpus() {
    static auto corpus = sample_corpus(canonical_fp(), 128, 20, 12, 0, 13);
    return corpus;
}

// --- criterion 1: quantizer contract ----------------------------------------

void criterion_quantizer() {
    const int bit_choices[] = {3, 4, 8};
    for (std::size_t g : {std::size_t{16}, std::size_t{128}}) {
        double prev_total = std::numeric_limits<double>::infinity();
        for (int bits : bit_choices) {
            QuantConfig cfg;
            cfg.bits = bits;
            cfg.group_size = g;
            double total = 0.0;
            for (int trial = 0; trial < 1000; ++trial) {
                Rng rng(Rng::substream(4242, static_cast<std::uint64_t>(trial) * 16 + g));
                Matrix w(1, g);
                for (double& v : w.data) v = rng.uniform(-1.0, 1.0);
                QuantizedTensor qt = quantize_tensor(w, cfg);
                Matrix back = dequantize(qt);
                for (std::size_t i = 0; i < g; ++i) {
                    const double err = std::abs(w.data[i] - back.data[i]);
                    require(err <= qt.scales[i / g] / 2.0 + 1e-12,
                            "round-trip error above s/2 at bits " + std::to_string(bits));
                    total += err * err;
                }
                Matrix twice = fake_quant(back, cfg);
                require(back.data == twice.data, "fake_quant not bitwise idempotent");
            }
            require(total <= prev_total + 1e-15,
                    "squared error not monotone in bits at group " + std::to_string(g));
            prev_total = total;
        }
    }
}

// --- criterion 2: prefill/decode equivalence ---------------------------------

void criterion_prefill_decode() {
    const Model& m = canonical_fp();
    for (int trial = 0; trial < 50; ++trial) {
        Rng rng(Rng::substream(777, static_cast<std::uint64_t>(trial)));
        const std::size_t len = 1 + rng.index(64);
        std::vector<int> tokens(len);
        for (auto& t : tokens) t = static_cast<int>(rng.index(m.config.vocab_size));
        ForwardTrace whole = forward(m, tokens);
        KVCache cache = KVCache::empty(m.config);
        Vector logits;
        for (int t : tokens) logits = decode_step(m, cache, t);
        for (std::size_t j = 0; j < logits.size(); ++j)
            require(std::abs(logits[j] - whole.logits(len - 1, j)) <= 1e-9,
                    "stepwise decode deviates from whole-sequence forward");
    }
}

// --- criterion 3: losslessness and consistency --------------------------------

void criterion_lossless() {
    const Model& m = canonical_fp();
    const auto& tokens = canonical_corpus()[0].tokens;
    for (std::size_t prefix : {std::size_t{1}, std::size_t{4}, std::size_t{8}}) {
        IntactKV kv = generate(m, std::span<const int>(tokens.data(), prefix));
        ForwardTrace full = forward(m, tokens);
        for (std::size_t l = 0; l < m.config.n_layers; ++l)
            for (std::size_t h = 0; h < m.config.n_heads; ++h)
                for (std::size_t p = 0; p < prefix; ++p)
                    for (std::size_t c = 0; c < m.config.head_dim(); ++c) {
                        require(kv.keys[l][h](p, c) == full.cache.keys[l][h](p, c),
                                "prefix K not bitwise equal to the forward cache");
                        require(kv.values[l][h](p, c) == full.cache.values[l][h](p, c),
                                "prefix V not bitwise equal to the forward cache");
                    }
        auto res = attach_and_prefill(
            m, kv, std::span<const int>(tokens.data() + prefix, tokens.size() - prefix));
        for (std::size_t i = 0; i < tokens.size() - prefix; ++i)
            for (std::size_t j = 0; j < m.config.vocab_size; ++j)
                require(std::abs(res.trace.logits(i, j) - full.logits(prefix + i, j)) <= 1e-9,
                        "attach_and_prefill deviates from plain forward");
    }
}

// --- criterion 4: prefix-size sweep orderings ----------------------------------

void criterion_sweep() {
    SweepReport rep = sweep_kv_size(canonical_fp(), canonical_corpus(), 3, 16, 8, 32);
    auto check = [&](auto get, const char* name) {
        require(get(rep.rows[1]) < get(rep.rows[0]),
                std::string(name) + ": MSE(m=1) not below MSE(m=0)");
        const double first_drop = get(rep.rows[0]) - get(rep.rows[1]);
        for (std::size_t i = 1; i < rep.rows.size(); ++i) {
            require(get(rep.rows[i]) <= get(rep.rows[i - 1]),
                    std::string(name) + ": MSE not non-increasing in m");
            if (i >= 2)
                require(get(rep.rows[i - 1]) - get(rep.rows[i]) <= first_drop,
                        std::string(name) + ": m=0->1 drop is not the largest");
        }
    };
    check([](const SweepRow& r) { return r.last_layer_mse; }, "last-layer MSE");
    check([](const SweepRow& r) { return r.attn_mse; }, "attention MSE");
}

// --- criterion 5: head-error bound dominance ------------------------------------

void criterion_bound() {
    const std::size_t ns[] = {2, 8, 16};
    const std::size_t ds[] = {2, 4, 8};
    const double deltas[] = {0.01, 0.1, 1.0};
    std::size_t trial = 0;
    for (std::size_t n : ns)
        for (std::size_t d : ds)
            for (double delta : deltas)
                for (int rep = 0; rep < 371; ++rep) {  // 27 x 371 >= 10000 instances
                    BoundInstance inst =
                        random_bound_instance(n, d, delta, 1, Rng::substream(9001, trial++));
                    BoundReport r = head_error_bound(inst);
                    require(r.actual <= r.bound, "bound violated on a random instance");
                }
    for (int t = 0; t < 1000; ++t) {
        BoundInstance inst =
            random_bound_instance(10, 4, 0.25, 1, Rng::substream(9002, static_cast<std::uint64_t>(t)));
        double prev = std::numeric_limits<double>::infinity();
        for (std::size_t count = 1; count <= 10; ++count) {
            inst.pivot_set.resize(count);
            for (std::size_t i = 0; i < count; ++i) inst.pivot_set[i] = i;
            BoundGap gap = intactkv_bound_gap(inst);
            require(gap.with_intactkv.bound <= prev + 1e-12,
                    "bound increased while growing the pivot set");
            prev = gap.with_intactkv.bound;
        }
    }
}

// --- criterion 6: gradient oracle -------------------------------------------------

void criterion_gradient() {
    {
        ModelConfig micro;
        micro.n_layers = 1;
        micro.d_model = 4;
        micro.n_heads = 1;
        micro.d_ff = 8;
        micro.vocab_size = 16;
        micro.max_seq = 32;
        Model fp = init_random(micro, 5);
        QuantConfig qc;
        qc.bits = 3;
        qc.group_size = 4;
        Model q = quantize_model_weights(fp, qc);
        const int ptoks[] = {1};
        IntactKV theta = generate(fp, ptoks);
        std::vector<int> seq = {1, 3, 7, 2, 9, 4, 11, 6};
        const double worst = grad_check(fp, q, theta, seq, 64, 1e-5, 3);
        require(worst < 1e-5, "micro-model gradient error " + fmt_double(worst));
    }
    {
        const Model& fp = canonical_fp();
        Model q = canonical_q();
        const auto& tokens = canonical_corpus()[0].tokens;
        IntactKV theta = generate(fp, std::span<const int>(tokens.data(), 1));
        std::vector<int> seq(tokens.begin(), tokens.begin() + 18);
        const double worst = grad_check(fp, q, theta, seq, 64, 1e-5, 3);
        require(worst < 1e-5, "canonical-model gradient error " + fmt_double(worst));
    }
}

// --- criterion 7: calibration efficacy ----------------------------------------------

void criterion_calibration() {
    const Model& fp = canonical_fp();
    Model q = canonical_q();
    for (std::uint64_t corpus_seed : {13ull, 1ull, 2ull, 3ull, 4ull}) {
        auto corpus = sample_corpus(fp, 128, 20, 12, 0, corpus_seed);
        std::vector<int> ptoks(corpus[0].tokens.begin(), corpus[0].tokens.begin() + 4);
        IntactKV theta0 = generate(fp, ptoks);
        Model fp_before = fp;
        Model q_before = q;
        CalibConfig cfg;  // lr 2e-4, 20 epochs, grad accumulation 16
        auto [theta, report] = calibrate(fp, q, theta0, corpus, cfg);
        require(report.updates == 160,
                "expected exactly 160 updates, got " + std::to_string(report.updates));
        require(report.final_loss < report.initial_loss,
                "no loss reduction at corpus seed " + std::to_string(corpus_seed));
        require(testutil::weights_bitwise_equal(fp.weights, fp_before.weights) &&
                    testutil::weights_bitwise_equal(q.weights, q_before.weights),
                "model weights changed during calibration");
        require(theta.provenance == Provenance::calibrated, "provenance not updated");
    }
}

// --- criterion 8: mixed-precision KV cache ------------------------------------------

void criterion_mixed_kv() {
    const Model& fp = canonical_fp();
    Model q = canonical_q();
    const auto& corpus = canonical_corpus();
    std::vector<CorpusSequence> sub(corpus.begin(), corpus.begin() + 8);
    std::vector<int> ptoks(corpus[0].tokens.begin(), corpus[0].tokens.begin() + 4);
    IntactKV theta = generate(fp, ptoks);
    const double keep_m = mixed_kv_continuation_mse(fp, q, theta, sub, 4, true);
    const double keep_0 = mixed_kv_continuation_mse(fp, q, theta, sub, 4, false);
    require(keep_m < keep_0, "keeping the prefix in full precision did not reduce MSE");
    const double kv8 = mixed_kv_continuation_mse(fp, q, theta, sub, 8, true);
    const double fp_kv = mixed_kv_continuation_mse(fp, q, theta, sub, 0, true);
    require(std::abs(kv8 - fp_kv) < 0.01 * fp_kv,
            "8-bit KV cache not within 1% of the full-precision KV cache");
}

// --- criterion 9: prefix smoothness and quantized prefix ------------------------------

void criterion_prefix_stats() {
    const Model& fp = canonical_fp();
    Model q = canonical_q();
    const auto& corpus = canonical_corpus();
    const std::size_t m = 4;
    double prefix_absmax = 0.0, cont_absmax = 0.0;
    for (std::size_t s = 0; s < 8; ++s) {
        ForwardTrace t = forward(fp, corpus[s].tokens);
        for (std::size_t l = 0; l < fp.config.n_layers; ++l)
            for (std::size_t h = 0; h < fp.config.n_heads; ++h)
                for (std::size_t p = 0; p < t.cache.seq_len; ++p)
                    for (std::size_t c = 0; c < fp.config.head_dim(); ++c) {
                        double& slot = p < m ? prefix_absmax : cont_absmax;
                        slot = std::max(slot, std::abs(t.cache.keys[l][h](p, c)));
                    }
    }
    require(prefix_absmax < cont_absmax, "prefix keys are not smoother than continuation keys");

    std::vector<CorpusSequence> sub(corpus.begin(), corpus.begin() + 8);
    std::vector<int> ptoks(corpus[0].tokens.begin(), corpus[0].tokens.begin() + m);
    IntactKV theta = generate(fp, ptoks);
    QuantConfig k8;
    k8.bits = 8;
    IntactKV theta_q8 = quantize_intactkv(theta, k8);
    const double mse_fp = mixed_kv_continuation_mse(fp, q, theta, sub, 0, true);
    const double mse_q8 = mixed_kv_continuation_mse(fp, q, theta_q8, sub, 0, true);
    require(std::abs(mse_q8 - mse_fp) < 0.05 * mse_fp,
            "8-bit prefix changed downstream MSE by 5% or more");
}

// --- criterion 10: CLI determinism ------------------------------------------------------

void criterion_determinism() {
    require(!testutil::cli_path().empty(), "IKV_CLI not set");
    // Prefix flags must name the corpus's actual shared tokens.
    std::string ptoks;
    for (std::size_t i = 0; i < 4; ++i)
        ptoks += (i ? " " : "") + std::to_string(canonical_corpus()[0].tokens[i]);
    const std::string steps[] = {
        "make-model --out model.ikvm",
        "make-corpus --model model.ikvm --out corpus.txt --sequences 32",
        "analyze --model model.ikvm --corpus corpus.txt --out pivots.csv",
        "quantize --model model.ikvm --bits 3 --group-size 16 --out q.ikvm",
        "generate-kv --model model.ikvm --prefix-tokens " + ptoks + " --out prefix.ikvp",
        "sweep-kv-size --model model.ikvm --corpus corpus.txt --out sweep.csv",
        "eval-ppl --model model.ikvm --corpus corpus.txt --bits 3 --group-size 16 "
        "--intactkv prefix.ikvp --kv-bits 8 --out ppl.csv",
        "calibrate --model model.ikvm --corpus corpus.txt --prefix-tokens " + ptoks +
            " --bits 3 --group-size 16 --epochs 1 --out cal.ikvp --report cal.csv "
            "--layer-report call.csv",
        "verify-bound --trials 500 --n 8 --d 4 --delta 0.05 --out bound.csv",
    };
    const fs::path a = testutil::fresh_dir("ikv_accept_a");
    const fs::path b = testutil::fresh_dir("ikv_accept_b");
    for (const auto& dir : {a, b})
        for (const std::string& step : steps)
            require(testutil::run_cli(dir, step) == 0, "subcommand failed: " + step);
    for (const auto& entry : fs::directory_iterator(a)) {
        const auto name = entry.path().filename();
        std::ifstream fa(entry.path(), std::ios::binary);
        std::ifstream fb(b / name, std::ios::binary);
        std::stringstream sa, sb;
        sa << fa.rdbuf();
        sb << fb.rdbuf();
        require(fb.good() && sa.str() == sb.str(),
                "artifact differs between identical runs: " + name.string());
    }
    fs::remove_all(a);
    fs::remove_all(b);
}

struct Criterion {
    int id;
    const char* name;
    double budget_seconds;
    std::function<void()> run;
};

}  // namespace

int main() {
    const std::vector<Criterion> criteria = {
        {1, "quantizer round-trip, idempotence, bit monotonicity", 5.0, criterion_quantizer},
        {2, "prefill/decode equivalence within 1e-9", 10.0, criterion_prefill_decode},
        {3, "prefix losslessness and attach consistency", 5.0, criterion_lossless},
        {4, "prefix-size sweep orderings (32 sequences, w3g16)", 60.0, criterion_sweep},
        {5, "head-error bound dominance and pivot monotonicity", 30.0, criterion_bound},
        {6, "analytic gradient vs central differences < 1e-5", 30.0, criterion_gradient},
        {7, "calibration reduces loss on 5 seeds (160 updates)", 300.0, criterion_calibration},
        {8, "mixed-precision KV cache orderings", 60.0, criterion_mixed_kv},
        {9, "prefix smoothness and 8-bit prefix MSE gap", 60.0, criterion_prefix_stats},
        {10, "byte-identical CLI artifacts across reruns", 120.0, criterion_determinism},
    };

    int failures = 0;
    for (const auto& c : criteria) {
        const auto t0 = std::chrono::steady_clock::now();
        std::string error;
        try {
            c.run();
        } catch (const std::exception& e) {
            error = e.what();
        }
        const double dt =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        bool ok = error.empty();
        if (ok && dt > c.budget_seconds) {
            ok = false;
            error = "exceeded runtime budget of " + fmt_double(c.budget_seconds) + " s";
        }
        std::printf("[%s] criterion %2d: %s (%.1f s)%s%s\n", ok ? "PASS" : "FAIL", c.id, c.name,
                    dt, ok ? "" : " -- ", error.c_str());
        std::fflush(stdout);
        if (!ok) ++failures;
    }
    std::printf("acceptance: %d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failures,
                criteria.size());
    return failures;
}
