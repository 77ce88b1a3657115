#pragma once

#include "cmr/cluster_store.hpp"
#include "cmr/error.hpp"
#include "cmr/harness.hpp"
#include "cmr/io.hpp"
#include "cmr/learner.hpp"
#include "cmr/metrics.hpp"
#include "cmr/refiners.hpp"
#include "cmr/replay_memory.hpp"
#include "cmr/rng.hpp"
#include "cmr/stream_sampler.hpp"
