#pragma once

// Everything at once.

#include "memlab/adam.hpp"
#include "memlab/bridge_client.hpp"
#include "memlab/error.hpp"
#include "memlab/experiments.hpp"
#include "memlab/io.hpp"
#include "memlab/language_model.hpp"
#include "memlab/metrics.hpp"
#include "memlab/micro_lm.hpp"
#include "memlab/probes.hpp"
#include "memlab/rng.hpp"
#include "memlab/string_lab.hpp"
#include "memlab/svg.hpp"
#include "memlab/trainer.hpp"
