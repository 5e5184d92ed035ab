// Trains one variant on seeded heteroskedastic synthetic data and prints its
// operating points and gains over a constant band around the same base.
//
//   synthetic_demo [variant] [train_sequences] [seed] [noise: gaussian|one_sided]
//                  [burst_probability] [jitter]

#include "uqseq/experiment.hpp"

#include <chrono>
#include <cstdio>
#include <iostream>
#include <string>

int main(int argc, char** argv) {
  using namespace uqseq;
  const std::string variant_name = argc > 1 ? argv[1] : "jms";
  const std::size_t n = argc > 2 ? std::stoul(argv[2]) : 2000;
  const std::uint64_t seed = argc > 3 ? std::stoull(argv[3]) : 1;
  const std::string noise = argc > 4 ? argv[4] : "gaussian";

  try {
    SyntheticProfile profile;
    profile.noise = parse_noise(noise);
    if (profile.noise == NoiseKind::one_sided) {
      profile.burst_probability = argc > 5 ? std::stod(argv[5]) : 0.1;
      profile.jitter = argc > 6 ? std::stod(argv[6]) : 0.05;
    }
    const auto synth = synth_heteroskedastic(n, seed, profile);
    ArchitectureConfig arch;
    arch.features = {FeatureSpec::real("u"), FeatureSpec::real("v"), FeatureSpec::real("tau")};
    arch.max_epochs_stage = 30;
    arch.max_epochs_phase = 30;

    const auto start = std::chrono::steady_clock::now();
    const auto model = train_variant(parse_variant(variant_name), synth.data, arch, seed, &std::cerr);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    auto stream = [&](const std::vector<SequenceSample>& split) {
      const auto opt = default_predict_options(model, seed);
      const auto preds = predict_all(model, split, opt);
      const auto ys = observations(model, split);
      return EvaluationStream{concat_predictions(preds), concat_columns(ys), split.front().targets.cols()};
    };
    const auto test = stream(synth.data.test);
    const auto calib = stream(synth.data.dev2);
    const auto e = evaluate_streams(variant_name, "test", test, calib, kDefaultMissrateTargets, 0, seed);

    std::printf("variant %s: trained in %.1f s over %zu epochs\n", variant_name.c_str(), secs, model.log.size());
    std::printf("E_base %.4f\n", e.e_base);
    for (std::size_t i = 0; i < e.xval_system.points.size(); ++i) {
      const auto& s = e.xval_system.points[i].achieved;
      const auto& r = e.xval_reference.points[i].achieved;
      std::printf("OP %.2f  system miss %.4f excess %.4f deficit %.4f | constant miss %.4f excess %.4f deficit %.4f\n",
                  e.xval_system.points[i].target_missrate, s.missrate, s.excess, s.deficit, r.missrate, r.excess,
                  r.deficit);
    }
    std::printf("Excess-Deficit average gain: G* %.1f%%  G^xval %.1f%%\n", e.oracle_gain.excess_deficit_average(),
                e.xval_gain.excess_deficit_average());
    if (!test.prediction.is_symmetric()) {
      std::vector<BoundedPrediction> preds;
      std::vector<Matrix> ys;
      preds.push_back(test.prediction);
      ys.push_back(test.observation);
      const auto o = orientation_accuracy(preds, ys, 0.05 * model.output_stats.std[0]);
      std::printf("mean z_lower %.4f  mean z_upper %.4f\n", test.prediction.z_lower.mean(),
                  test.prediction.z_upper.mean());
      std::printf("orientation accuracy %.3f over %zu pairs (%zu ties, %zu filtered)\n", o.accuracy, o.counted,
                  o.ties, o.filtered);
    }
  } catch (const Error& e) {
    std::cerr << "error [" << to_string(e.code()) << "]: " << e.what() << '\n';
    return exit_code_for(e.code());
  }
  return 0;
}
