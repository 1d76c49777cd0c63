#pragma once

#include "ucgsd/canon.hpp"
#include "ucgsd/equivariance.hpp"
#include "ucgsd/errors.hpp"
#include "ucgsd/eval.hpp"
#include "ucgsd/experiment.hpp"
#include "ucgsd/gauge.hpp"
#include "ucgsd/network.hpp"
#include "ucgsd/network_io.hpp"
#include "ucgsd/optim.hpp"
#include "ucgsd/parallel.hpp"
#include "ucgsd/rng.hpp"
#include "ucgsd/tasks.hpp"
#include "ucgsd/tensor.hpp"
#include "ucgsd/text_io.hpp"
#include "ucgsd/trainer.hpp"
