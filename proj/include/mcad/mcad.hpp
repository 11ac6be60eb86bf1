#pragma once

#include "mcad/error.hpp"
#include "mcad/log.hpp"
#include "mcad/dataset.hpp"
#include "mcad/observations.hpp"
#include "mcad/baseline.hpp"
#include "mcad/lowrank.hpp"
#include "mcad/solver.hpp"
#include "mcad/ranking.hpp"
#include "mcad/metrics.hpp"
#include "mcad/matrix_io.hpp"
#include "mcad/experiment.hpp"
