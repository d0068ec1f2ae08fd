// One violating pair, trained with DPO and with CPO at 1.01 gamma*.
#include "prefopt/diagnostics.hpp"
#include "prefopt/trainer.hpp"

#include <cstdio>

int main()
{
    using namespace prefopt;
    const auto space = ResponseSpace::uniform(1, 2);
    const RewardTable reward(space, {{0.5, 0.0}});
    // the reference strongly prefers the loser: delta_ref = -8
    const TabularPolicy ref(space, {{0.0, 8.0}});
    const PreferenceDataset pairs(space, {{0, 0, 1, 1.0}});
    const double beta = 1.0;

    const auto probe = precompute_ref_stats(pairs, ref, 0.0, 1.0, beta);
    const double gstar = gamma_star(probe, ref, reward, beta);
    std::printf("delta_ref = %.3f, dr/beta = %.3f, gamma* = %.4g\n", probe.ref_stats()[0].delta_ref,
                reward.diff(0, 0, 1) / beta, gstar);

    for (LossKind kind : {LossKind::DPO, LossKind::CPO}) {
        const double gamma = kind == LossKind::CPO ? 1.01 * gstar : 0.0;
        const auto data = precompute_ref_stats(pairs, ref, gamma, 1.0, beta);
        TrainConfig cfg;
        cfg.spec = {kind, beta, gamma, 1.0};
        cfg.learning_rate = 0.5;
        cfg.steps = 5000;
        const auto run = train(cfg, data, ref);
        for (const auto& r : run.trajectory.records) {
            if (r.step != 0 && r.step != 10 && r.step != 100 && r.step != 1000 && r.step != 5000) continue;
            std::printf("%-4s step %5zu  loss %.5f  delta %+.4f  in_U %s\n", to_string(kind), r.step, r.loss,
                        r.mean_delta_theta, r.frac_in_U > 0 ? "yes" : "no");
        }
    }
    return 0;
}
