#pragma once

#include "qprobe/data.hpp"
#include "qprobe/error.hpp"
#include "qprobe/losses.hpp"
#include "qprobe/numeric.hpp"
#include "qprobe/probe.hpp"
#include "qprobe/rng.hpp"
#include "qprobe/sampler.hpp"
#include "qprobe/synthlab.hpp"
#include "qprobe/trainer.hpp"
