#pragma once

#include "cryoseg/config.hpp"

namespace cryoseg {

/// Per-epoch learning rate schedule sweeping between lr_min and lr_max.
/// Cosine variants stay within [lr_min, lr_max]; exponential decays from
/// lr_max and is floored at lr_min * 1e-3; restarts reset to lr_max.
class LrScheduler {
public:
    LrScheduler(SchedulerKind kind, double lr_min, double lr_max, int total_epochs,
                int restart_period = 10, double gamma = 0.95, int plateau_patience = 5,
                double plateau_factor = 0.5);

    /// Learning rate for the given epoch (0-based). For the plateau
    /// scheduler, call observe() once per epoch first.
    double lr(int epoch) const;

    /// Feed the plateau scheduler a validation score (higher is better).
    void observe(double score);

private:
    SchedulerKind kind_;
    double lr_min_, lr_max_;
    int total_epochs_;
    int restart_period_;
    double gamma_;
    int plateau_patience_;
    double plateau_factor_;

    double best_score_ = -1e300;
    int since_best_ = 0;
    double plateau_lr_;
};

}  // namespace cryoseg
