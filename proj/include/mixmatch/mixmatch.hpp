#pragma once

#include "mixmatch/baselines.hpp"
#include "mixmatch/checkpoint.hpp"
#include "mixmatch/config.hpp"
#include "mixmatch/data.hpp"
#include "mixmatch/experiment.hpp"
#include "mixmatch/model.hpp"
#include "mixmatch/rng.hpp"
#include "mixmatch/ssl.hpp"
#include "mixmatch/tensor.hpp"
#include "mixmatch/train.hpp"
