// Command-line laboratory for group-wise quantization of a toy decoder with
// lossless KV-cache prefixes: pivot analysis, prefix-size sweeps, perplexity
// evaluation, prefix calibration, and attention-error bound campaigns.

#include <cstdio>
#include <exception>
#include <functional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ikv/harness.hpp"

namespace {

using namespace ikv;

int run_make_model(const std::string& out, std::uint64_t seed, std::size_t sink_token,
                   std::size_t sink_channels, double sink_scale) {
    Model m = make_sink_model(seed, sink_token, sink_channels, sink_scale);
    save_model(m, out);
    std::printf("wrote %s (seed=%llu, sink_scale=%g)\n", out.c_str(),
                static_cast<unsigned long long>(seed), sink_scale);
    return 0;
}

int run_make_corpus(const std::string& model_path, const std::string& out,
                    std::size_t sequences, std::size_t length, std::size_t common_prefix,
                    int start_token, std::uint64_t seed) {
    Model m = load_model(model_path);
    auto corpus = sample_corpus(m, sequences, length, common_prefix, start_token, seed);
    write_corpus(out, corpus);
    std::printf("wrote %s (%zu sequences, length %zu, common prefix %zu)\n", out.c_str(),
                sequences, length, common_prefix);
    return 0;
}

int run_analyze(const std::string& model_path, const std::string& corpus_path,
                const std::string& out, const std::string& mass_out, int layer,
                double act_ratio, double mass_ratio) {
    Model m = load_model(model_path);
    auto corpus = read_corpus(corpus_path);
    if (corpus.empty()) throw InputError("analyze: empty corpus");
    const std::size_t use_layer =
        layer < 0 ? m.config.n_layers - 1 : static_cast<std::size_t>(layer);
    AnalyzeResult res =
        analyze_sequence(m, corpus[0].tokens, use_layer, act_ratio, mass_ratio);
    atomic_write_file(out, pivot_report_csv(res.report));
    const std::string mass_path = mass_out.empty() ? out + ".mass.csv" : mass_out;
    atomic_write_file(mass_path, attention_mass_csv(res.per_layer_mass));
    std::size_t pivots = 0;
    for (const auto& r : res.report.rows) pivots += r.is_pivot ? 1 : 0;
    std::printf("wrote %s and %s (%zu pivot(s) flagged)\n", out.c_str(), mass_path.c_str(),
                pivots);
    return 0;
}

int run_quantize(const std::string& model_path, const std::string& out, int bits,
                 std::size_t group_size) {
    Model m = load_model(model_path);
    QuantConfig cfg;
    cfg.bits = bits;
    cfg.group_size = group_size;
    save_model(quantize_model_weights(m, cfg), out);
    std::printf("wrote %s (w%dg%zu round-to-nearest)\n", out.c_str(), bits, group_size);
    return 0;
}

int run_generate_kv(const std::string& model_path, const std::string& out,
                    const std::vector<int>& prefix_tokens, int kv_bits) {
    Model m = load_model(model_path);
    IntactKV kv = generate(m, prefix_tokens);
    if (kv_bits > 0) {
        QuantConfig cfg;
        cfg.bits = kv_bits;
        kv = quantize_intactkv(kv, cfg);
    }
    save_intactkv(kv, out);
    std::printf("wrote %s (m=%zu, provenance=%s)\n", out.c_str(), kv.prefix_len,
                provenance_name(kv.provenance));
    return 0;
}

int run_calibrate(const std::string& model_path, const std::string& corpus_path,
                  const std::string& out, const std::string& report_path,
                  const std::string& layer_report_path, const std::vector<int>& prefix_tokens,
                  int bits, std::size_t group_size, const CalibConfig& cfg) {
    Model fp = load_model(model_path);
    QuantConfig qc;
    qc.bits = bits;
    qc.group_size = group_size;
    Model q = quantize_model_weights(fp, qc);
    IntactKV theta0 = generate(fp, prefix_tokens);
    auto corpus = read_corpus(corpus_path);
    auto [theta, report] = calibrate(fp, q, theta0, corpus, cfg);
    save_intactkv(theta, out);
    atomic_write_file(report_path, calib_csv(report));
    atomic_write_file(layer_report_path, calib_layer_csv(report));
    if (report.grad_check_max_rel_error >= 0.0)
        std::printf("grad_check_max_rel_error=%s\n",
                    fmt_double(report.grad_check_max_rel_error).c_str());
    std::printf("updates=%zu initial_loss=%s final_loss=%s%s -> %s\n", report.updates,
                fmt_double(report.initial_loss).c_str(), fmt_double(report.final_loss).c_str(),
                report.reverted_to_initial ? " (reverted)" : "", out.c_str());
    return 0;
}

int run_sweep(const std::string& model_path, const std::string& corpus_path,
              const std::string& out, int bits, std::size_t group_size, std::size_t m_max,
              std::size_t sequences, std::uint64_t seed) {
    Model fp = load_model(model_path);
    auto corpus = read_corpus(corpus_path);
    SweepReport rep = sweep_kv_size(fp, corpus, bits, group_size, m_max, sequences, seed);
    atomic_write_file(out, sweep_csv(rep));
    std::printf("wrote %s (%zu rows, scored from position %zu)\n", out.c_str(),
                rep.rows.size(), rep.eval_start);
    return 0;
}

int run_eval_ppl(const std::string& model_path, const std::string& corpus_path,
                 const std::string& out, int bits, std::size_t group_size, int kv_bits,
                 std::size_t keep_prefix_fp, bool keep_given, const std::string& intactkv_path,
                 std::size_t score_start) {
    Model m = load_model(model_path);
    if (bits > 0) {
        QuantConfig qc;
        qc.bits = bits;
        qc.group_size = group_size;
        m = quantize_model_weights(m, qc);
    }
    IntactKV kv;
    PplOptions opts;
    opts.dataset = corpus_path;
    opts.score_start = score_start;
    if (!intactkv_path.empty()) {
        kv = load_intactkv(intactkv_path, m.config);
        opts.intactkv = &kv;
    }
    if (kv_bits > 0) {
        opts.kv_quant.enabled = true;
        opts.kv_quant.bits = kv_bits;
        opts.kv_quant.keep_prefix_fp =
            keep_given ? keep_prefix_fp : (opts.intactkv ? kv.prefix_len : 0);
    }
    PplReport rep = eval_ppl(m, read_corpus(corpus_path), opts);
    atomic_write_file(out, ppl_csv(rep));
    std::printf("ppl=%s over %zu tokens -> %s\n", fmt_double(rep.perplexity).c_str(),
                rep.total_scored, out.c_str());
    return 0;
}

int run_verify_bound(const std::string& out, std::size_t n, std::size_t d, double delta,
                     std::size_t trials, std::size_t pivot_count, std::uint64_t seed) {
    BoundCampaign c = bound_campaign(n, d, delta, trials, pivot_count, seed);
    atomic_write_file(out, bound_csv(c));
    std::printf("trials=%zu dominance_violations=%zu gap_violations=%zu -> %s\n", trials,
                c.dominance_violations, c.gap_violations, out.c_str());
    return (c.dominance_violations || c.gap_violations) ? 1 : 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"quantization laboratory for lossless KV-cache prefixes"};
    app.require_subcommand(1);

    std::function<int()> action;

    // make-model
    {
        auto* cmd = app.add_subcommand("make-model", "write a toy decoder model file");
        auto seed = std::make_shared<std::uint64_t>(42);
        auto out = std::make_shared<std::string>("model.ikvm");
        auto token = std::make_shared<std::size_t>(0);
        auto channels = std::make_shared<std::size_t>(4);
        auto scale = std::make_shared<double>(1e3);
        cmd->add_option("--seed", *seed, "init seed");
        cmd->add_option("--out", *out, "output model path");
        cmd->add_option("--sink-token", *token, "token receiving the synthetic sink");
        cmd->add_option("--sink-channels", *channels, "number of scaled embedding channels");
        cmd->add_option("--sink-scale", *scale, "embedding scale factor (1 = no sink)");
        cmd->callback([=, &action] {
            action = [=] { return run_make_model(*out, *seed, *token, *channels, *scale); };
        });
    }
    // make-corpus
    {
        auto* cmd = app.add_subcommand("make-corpus", "sample a token corpus from a model");
        auto model = std::make_shared<std::string>();
        auto out = std::make_shared<std::string>("corpus.txt");
        auto sequences = std::make_shared<std::size_t>(128);
        auto length = std::make_shared<std::size_t>(20);
        auto prefix = std::make_shared<std::size_t>(12);
        auto start = std::make_shared<int>(0);
        auto seed = std::make_shared<std::uint64_t>(13);
        cmd->add_option("--model", *model, "teacher model path")->required();
        cmd->add_option("--out", *out, "output corpus path");
        cmd->add_option("--sequences", *sequences, "number of sequences");
        cmd->add_option("--length", *length, "tokens per sequence");
        cmd->add_option("--common-prefix", *prefix, "shared prefix length");
        cmd->add_option("--start-token", *start, "first token of every sequence");
        cmd->add_option("--seed", *seed, "sampling seed");
        cmd->callback([=, &action] {
            action = [=] {
                return run_make_corpus(*model, *out, *sequences, *length, *prefix, *start, *seed);
            };
        });
    }
    // analyze
    {
        auto* cmd = app.add_subcommand("analyze", "pivot-token statistics of a forward pass");
        auto model = std::make_shared<std::string>();
        auto corpus = std::make_shared<std::string>();
        auto out = std::make_shared<std::string>("pivots.csv");
        auto mass_out = std::make_shared<std::string>("");
        auto layer = std::make_shared<int>(-1);
        auto act_ratio = std::make_shared<double>(10.0);
        auto mass_ratio = std::make_shared<double>(5.0);
        cmd->add_option("--model", *model, "model path")->required();
        cmd->add_option("--corpus", *corpus, "corpus path (first sequence analyzed)")->required();
        cmd->add_option("--out", *out, "pivot CSV path");
        cmd->add_option("--mass-out", *mass_out, "per-layer attention-mass CSV path");
        cmd->add_option("--layer", *layer, "report layer (-1 = last)");
        cmd->add_option("--act-ratio", *act_ratio, "activation/median pivot threshold");
        cmd->add_option("--mass-ratio", *mass_ratio, "mass/(1/n) pivot threshold");
        cmd->callback([=, &action] {
            action = [=] {
                return run_analyze(*model, *corpus, *out, *mass_out, *layer, *act_ratio,
                                   *mass_ratio);
            };
        });
    }
    // quantize
    {
        auto* cmd = app.add_subcommand("quantize", "round-to-nearest weight quantization");
        auto model = std::make_shared<std::string>();
        auto out = std::make_shared<std::string>("model.q.ikvm");
        auto bits = std::make_shared<int>(4);
        auto group = std::make_shared<std::size_t>(128);
        cmd->add_option("--model", *model, "model path")->required();
        cmd->add_option("--out", *out, "output model path");
        cmd->add_option("--bits", *bits, "weight bits");
        cmd->add_option("--group-size", *group, "quantization group size");
        cmd->callback([=, &action] {
            action = [=] { return run_quantize(*model, *out, *bits, *group); };
        });
    }
    // generate-kv
    {
        auto* cmd = app.add_subcommand("generate-kv", "generate a KV prefix from a model");
        auto model = std::make_shared<std::string>();
        auto out = std::make_shared<std::string>("prefix.ikvp");
        auto tokens = std::make_shared<std::vector<int>>();
        auto kv_bits = std::make_shared<int>(0);
        cmd->add_option("--model", *model, "model path")->required();
        cmd->add_option("--out", *out, "output prefix path");
        cmd->add_option("--prefix-tokens", *tokens, "prefix token ids")->required();
        cmd->add_option("--kv-bits", *kv_bits, "also quantize the prefix (0 = keep lossless)");
        cmd->callback([=, &action] {
            action = [=] { return run_generate_kv(*model, *out, *tokens, *kv_bits); };
        });
    }
    // calibrate
    {
        auto* cmd = app.add_subcommand("calibrate", "train the prefix against layer-wise MSE");
        auto model = std::make_shared<std::string>();
        auto corpus = std::make_shared<std::string>();
        auto out = std::make_shared<std::string>("prefix.calibrated.ikvp");
        auto report = std::make_shared<std::string>("");
        auto layer_report = std::make_shared<std::string>("");
        auto tokens = std::make_shared<std::vector<int>>();
        auto bits = std::make_shared<int>(3);
        auto group = std::make_shared<std::size_t>(128);
        auto cfg = std::make_shared<CalibConfig>();
        cmd->add_option("--model", *model, "full-precision model path")->required();
        cmd->add_option("--corpus", *corpus, "calibration corpus path")->required();
        cmd->add_option("--out", *out, "output prefix path");
        cmd->add_option("--report", *report, "loss trajectory CSV path");
        cmd->add_option("--layer-report", *layer_report, "per-layer loss CSV path");
        cmd->add_option("--prefix-tokens", *tokens, "prefix token ids")->required();
        cmd->add_option("--bits", *bits, "weight bits for the quantized branch");
        cmd->add_option("--group-size", *group, "weight quantization group size");
        cmd->add_option("--lr", cfg->learning_rate, "learning rate");
        cmd->add_option("--epochs", cfg->epochs, "epochs over the corpus");
        cmd->add_option("--grad-accum", cfg->grad_accum, "micro-batches per update");
        cmd->add_option("--batch", cfg->batch, "sequences per micro-batch");
        cmd->add_option("--weight-decay", cfg->weight_decay, "decoupled weight decay");
        cmd->add_option("--threads", cfg->threads, "worker threads (0 = hardware)");
        cmd->add_option("--seed", cfg->seed, "run seed (recorded)");
        cmd->add_option("--grad-check", cfg->grad_check_coords,
                        "audit this many gradient coordinates before training");
        cmd->callback([=, &action] {
            action = [=] {
                const std::string rpt = report->empty() ? *out + ".csv" : *report;
                const std::string lrpt = layer_report->empty() ? *out + ".layers.csv" : *layer_report;
                return run_calibrate(*model, *corpus, *out, rpt, lrpt, *tokens, *bits, *group,
                                     *cfg);
            };
        });
    }
    // sweep-kv-size
    {
        auto* cmd = app.add_subcommand("sweep-kv-size", "quantization loss vs prefix length");
        auto model = std::make_shared<std::string>();
        auto corpus = std::make_shared<std::string>();
        auto out = std::make_shared<std::string>("sweep.csv");
        auto bits = std::make_shared<int>(3);
        auto group = std::make_shared<std::size_t>(16);
        auto m_max = std::make_shared<std::size_t>(8);
        auto sequences = std::make_shared<std::size_t>(32);
        auto seed = std::make_shared<std::uint64_t>(0);
        cmd->add_option("--model", *model, "full-precision model path")->required();
        cmd->add_option("--corpus", *corpus, "corpus with a shared prefix")->required();
        cmd->add_option("--out", *out, "sweep CSV path");
        cmd->add_option("--bits", *bits, "weight bits");
        cmd->add_option("--group-size", *group, "weight quantization group size");
        cmd->add_option("--m-max", *m_max, "largest prefix length");
        cmd->add_option("--sequences", *sequences, "sequences to average");
        cmd->add_option("--seed", *seed, "run seed (recorded)");
        cmd->callback([=, &action] {
            action = [=] {
                return run_sweep(*model, *corpus, *out, *bits, *group, *m_max, *sequences, *seed);
            };
        });
    }
    // eval-ppl
    {
        auto* cmd = app.add_subcommand("eval-ppl", "perplexity under a quantization setting");
        auto model = std::make_shared<std::string>();
        auto corpus = std::make_shared<std::string>();
        auto out = std::make_shared<std::string>("ppl.csv");
        auto bits = std::make_shared<int>(0);
        auto group = std::make_shared<std::size_t>(128);
        auto kv_bits = std::make_shared<int>(0);
        auto keep = std::make_shared<std::size_t>(0);
        auto intactkv = std::make_shared<std::string>("");
        auto score_start = std::make_shared<std::size_t>(1);
        cmd->add_option("--model", *model, "model path")->required();
        cmd->add_option("--corpus", *corpus, "evaluation corpus")->required();
        cmd->add_option("--out", *out, "perplexity CSV path");
        cmd->add_option("--bits", *bits, "weight bits (0 = full precision)");
        cmd->add_option("--group-size", *group, "weight quantization group size");
        cmd->add_option("--kv-bits", *kv_bits, "dynamic KV-cache bits (0 = off)");
        auto* keep_opt =
            cmd->add_option("--keep-prefix-fp", *keep, "positions kept full precision");
        cmd->add_option("--intactkv", *intactkv, "prefix file to attach");
        cmd->add_option("--score-start", *score_start, "first scored target position");
        cmd->callback([=, &action] {
            const bool keep_given = keep_opt->count() > 0;
            action = [=] {
                return run_eval_ppl(*model, *corpus, *out, *bits, *group, *kv_bits, *keep,
                                    keep_given, *intactkv, *score_start);
            };
        });
    }
    // verify-bound
    {
        auto* cmd = app.add_subcommand("verify-bound", "Monte-Carlo audit of the head-error bound");
        auto out = std::make_shared<std::string>("bound.csv");
        auto n = std::make_shared<std::size_t>(8);
        auto d = std::make_shared<std::size_t>(4);
        auto delta = std::make_shared<double>(0.05);
        auto trials = std::make_shared<std::size_t>(10000);
        auto pivots = std::make_shared<std::size_t>(1);
        auto seed = std::make_shared<std::uint64_t>(0);
        cmd->add_option("--out", *out, "trial CSV path");
        cmd->add_option("--n", *n, "cached sequence length");
        cmd->add_option("--d", *d, "head dimension");
        cmd->add_option("--delta", *delta, "perturbation scale");
        cmd->add_option("--trials", *trials, "number of instances");
        cmd->add_option("--pivot-count", *pivots, "pivot rows per instance");
        cmd->add_option("--seed", *seed, "campaign seed");
        cmd->callback([=, &action] {
            action = [=] {
                return run_verify_bound(*out, *n, *d, *delta, *trials, *pivots, *seed);
            };
        });
    }

    CLI11_PARSE(app, argc, argv);

    try {
        return action();
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}
