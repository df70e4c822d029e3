#pragma once

// single include for the whole library

#include "dab/baselines.hpp"
#include "dab/cli.hpp"
#include "dab/constraints.hpp"
#include "dab/io.hpp"
#include "dab/lm.hpp"
#include "dab/metrics.hpp"
#include "dab/numeric.hpp"
#include "dab/sampler.hpp"
#include "dab/synthetic.hpp"
